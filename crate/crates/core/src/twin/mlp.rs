//! A one-hidden-layer tanh regressor with a linear skip path, trained with
//! Adam. Small enough to hand-write; no ML framework needed.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// Flat layout: `w1 (hidden×in) | b1 | w2 (out×hidden) | b2 | skip (out×in)`.
    pub weights: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    skip: usize,
    len: usize,
}

impl Mlp {
    fn layout(n_in: usize, n_hidden: usize, n_out: usize) -> Layout {
        let w1 = 0;
        let b1 = w1 + n_hidden * n_in;
        let w2 = b1 + n_hidden;
        let b2 = w2 + n_out * n_hidden;
        let skip = b2 + n_out;
        let len = skip + n_out * n_in;
        Layout {
            w1,
            b1,
            w2,
            b2,
            skip,
            len,
        }
    }

    /// Glorot-uniform hidden weights, a small random output layer and a zero
    /// skip path, so an untrained network predicts a near-zero correction.
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let l = Self::layout(n_in, n_hidden, n_out);
        let mut weights = vec![0.0; l.len];
        let a1 = (6.0 / (n_in + n_hidden) as f64).sqrt();
        for w in &mut weights[l.w1..l.b1] {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (n_hidden + n_out) as f64).sqrt() * 0.1;
        for w in &mut weights[l.w2..l.b2] {
            *w = rng.random_range(-a2..a2);
        }
        Self {
            n_in,
            n_hidden,
            n_out,
            weights,
        }
    }

    /// A network that ignores its input and returns `bias`.
    pub fn constant(n_in: usize, n_hidden: usize, bias: &[f64]) -> Self {
        let n_out = bias.len();
        let l = Self::layout(n_in, n_hidden, n_out);
        let mut weights = vec![0.0; l.len];
        weights[l.b2..l.skip].copy_from_slice(bias);
        Self {
            n_in,
            n_hidden,
            n_out,
            weights,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass; `hidden` receives the activations.
    fn forward_into(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let l = Self::layout(self.n_in, self.n_hidden, self.n_out);
        let w = &self.weights;
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &w[l.w1 + j * self.n_in..l.w1 + (j + 1) * self.n_in];
            let z = w[l.b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *h = z.tanh();
        }
        for (k, o) in out.iter_mut().enumerate() {
            let row2 = &w[l.w2 + k * self.n_hidden..l.w2 + (k + 1) * self.n_hidden];
            let rows = &w[l.skip + k * self.n_in..l.skip + (k + 1) * self.n_in];
            *o = w[l.b2 + k]
                + row2.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>()
                + rows.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.n_hidden];
        let mut out = vec![0.0; self.n_out];
        self.forward_into(x, &mut hidden, &mut out);
        out
    }

    /// Accumulates into `grad` the gradient for one sample given the
    /// upstream derivative `d_out` of the loss with respect to the output.
    fn backward(&self, x: &[f64], hidden: &[f64], d_out: &[f64], grad: &mut [f64]) {
        let l = Self::layout(self.n_in, self.n_hidden, self.n_out);
        let w = &self.weights;
        for (k, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + k] += g;
            let base2 = l.w2 + k * self.n_hidden;
            for (j, &h) in hidden.iter().enumerate() {
                grad[base2 + j] += g * h;
            }
            let bases = l.skip + k * self.n_in;
            for (i, &xi) in x.iter().enumerate() {
                grad[bases + i] += g * xi;
            }
        }
        for (j, &h) in hidden.iter().enumerate() {
            let mut dh = 0.0;
            for (k, &g) in d_out.iter().enumerate() {
                dh += w[l.w2 + k * self.n_hidden + j] * g;
            }
            let dz = dh * (1.0 - h * h);
            if dz == 0.0 {
                continue;
            }
            grad[l.b1 + j] += dz;
            let base1 = l.w1 + j * self.n_in;
            for (i, &xi) in x.iter().enumerate() {
                grad[base1 + i] += dz * xi;
            }
        }
    }

    /// Mean loss and its gradient over a batch. `loss_grad` maps
    /// `(sample index, prediction)` to `(loss, d loss / d prediction)`.
    pub fn batch_gradient<F>(&self, inputs: &[&[f64]], ids: &[usize], mut loss_grad: F) -> (f64, Vec<f64>)
    where
        F: FnMut(usize, &[f64], &mut [f64]) -> f64,
    {
        let mut grad = vec![0.0; self.n_params()];
        let mut hidden = vec![0.0; self.n_hidden];
        let mut out = vec![0.0; self.n_out];
        let mut d_out = vec![0.0; self.n_out];
        let mut total = 0.0;
        for (&x, &id) in inputs.iter().zip(ids) {
            self.forward_into(x, &mut hidden, &mut out);
            d_out.iter_mut().for_each(|d| *d = 0.0);
            total += loss_grad(id, &out, &mut d_out);
            self.backward(x, &hidden, &d_out, &mut grad);
        }
        let n = inputs.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (total / n, grad)
    }
}

/// Adam with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..weights.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            weights[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(3, 4, 2, &mut rng);
        for w in net.weights.iter_mut() {
            *w += rng.random_range(-0.3..0.3);
        }
        let x = [0.3, -0.7, 1.1];
        let target = [0.5, -0.2];
        let loss = |net: &Mlp| {
            let y = net.forward(&x);
            y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let inputs: Vec<&[f64]> = vec![&x];
        let (_, grad) = net.batch_gradient(&inputs, &[0], |_, y, d| {
            let mut l = 0.0;
            for k in 0..y.len() {
                let e = y[k] - target[k];
                l += e * e;
                d[k] = 2.0 * e;
            }
            l
        });
        let h = 1e-6;
        for i in 0..net.n_params() {
            let mut p = net.clone();
            p.weights[i] += h;
            let mut m = net.clone();
            m.weights[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn constant_network_ignores_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(5, 8, 3, &mut rng);
        assert!(net.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]).iter().all(|y| y.abs() < 1.0));
        let c = Mlp::constant(5, 8, &[1.0, -2.0]);
        assert_eq!(c.forward(&[9.0; 5]), vec![1.0, -2.0]);
    }
}

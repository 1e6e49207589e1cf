//! Least-squares fit of θ by bounded Nelder–Mead in the unit cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Feature;
use super::{Dataset, TwinParams};
use crate::error::{Error, Result};
use crate::plant::{self, PlantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error of each feature divided by its mean magnitude.
    Relative,
    /// Raw squared error in native units.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub loss: LossKind,
    pub max_evals_per_start: usize,
    pub restarts: usize,
    /// Half-width of the uniform jitter applied to restart points, in unit-cube
    /// coordinates.
    pub jitter: f64,
    /// Stop when the simplex values agree to this relative tolerance.
    pub ftol: f64,
    /// ... and its vertices to this distance in unit coordinates.
    pub xtol: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Relative,
            max_evals_per_start: 2000,
            restarts: 3,
            jitter: 0.1,
            ftol: 1e-9,
            xtol: 1e-6,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: TwinParams,
    pub objective: f64,
    pub initial_objective: f64,
    pub evaluations: usize,
    /// Every start ran out of evaluations before converging.
    pub budget_exhausted: bool,
}

struct Objective<'a> {
    data: &'a Dataset,
    base: &'a PlantConfig,
    scales: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(data: &'a Dataset, base: &'a PlantConfig, loss: LossKind) -> Self {
        let n = data.len().max(1) as f64;
        let scales = Feature::CALIBRATION
            .iter()
            .map(|f| match loss {
                LossKind::Absolute => 1.0,
                LossKind::Relative => {
                    let m = data.transitions.iter().map(|t| f.of(&t.s_next).abs()).sum::<f64>() / n;
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                }
            })
            .collect();
        Self { data, base, scales }
    }

    fn eval(&self, params: &TwinParams) -> f64 {
        let cfg = params.apply(self.base);
        if cfg.validate().is_err() {
            return f64::INFINITY;
        }
        let mut total = 0.0;
        for tr in &self.data.transitions {
            let Ok(pred) = plant::step(&tr.s, &tr.a, &tr.exo, &cfg) else {
                return f64::INFINITY;
            };
            for (f, scale) in Feature::CALIBRATION.iter().zip(&self.scales) {
                total += ((f.of(&tr.s_next) - f.of(&pred)) / scale).powi(2);
            }
        }
        let v = total / self.data.len().max(1) as f64;
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }
}

/// Mean per-transition squared error of one-step physics predictions.
pub fn calibration_objective(
    data: &Dataset,
    base: &PlantConfig,
    params: &TwinParams,
    loss: LossKind,
) -> f64 {
    Objective::new(data, base, loss).eval(params)
}

/// Fits θ to `data`, starting from `theta0`.
///
/// The first start is `theta0` itself; later starts jitter the best point
/// found so far. The result never scores worse than `theta0`.
pub fn calibrate(
    data: &Dataset,
    base: &PlantConfig,
    theta0: &TwinParams,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    theta0.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("calibration needs data".into()));
    }
    if cfg.restarts == 0 || cfg.max_evals_per_start < theta0.len() + 1 {
        return Err(Error::Config("calibration budget too small".into()));
    }
    let obj = Objective::new(data, base, cfg.loss);
    let f = |u: &[f64]| obj.eval(&theta0.with_unit(u));
    let initial = f(&theta0.to_unit());
    let mut best_u = theta0.to_unit();
    let mut best_f = initial;
    let mut evaluations = 1;
    let mut all_exhausted = true;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if theta0.is_empty() {
        return Ok(CalibrationResult {
            params: theta0.clone(),
            objective: initial,
            initial_objective: initial,
            evaluations,
            budget_exhausted: false,
        });
    }

    for start in 0..cfg.restarts {
        let x0: Vec<f64> = if start == 0 {
            best_u.clone()
        } else {
            best_u
                .iter()
                .map(|&x| (x + rng.random_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0))
                .collect()
        };
        let run = nelder_mead(&f, &x0, cfg.max_evals_per_start, cfg.ftol, cfg.xtol);
        evaluations += run.evals;
        all_exhausted &= !run.converged;
        if run.fx < best_f {
            best_f = run.fx;
            best_u = run.x;
        }
    }
    if all_exhausted {
        log::warn!("calibration used its whole budget on every start; returning best so far");
    }
    Ok(CalibrationResult {
        params: theta0.with_unit(&best_u),
        objective: best_f,
        initial_objective: initial,
        evaluations,
        budget_exhausted: all_exhausted,
    })
}

struct NmRun {
    x: Vec<f64>,
    fx: f64,
    evals: usize,
    converged: bool,
}

/// Nelder–Mead over `[0, 1]^n`; trial points are clamped into the cube.
fn nelder_mead(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    max_evals: usize,
    ftol: f64,
    xtol: f64,
) -> NmRun {
    let n = x0.len();
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    let mut evals = 0;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let fx0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), fx0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] + 0.1 <= 1.0 { x[i] + 0.1 } else { x[i] - 0.1 };
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = worst - best;
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= ftol * (best.abs() + 1e-12)) || size <= xtol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    *x = x_best.iter().zip(x.iter()).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    *fx = eval(x, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NmRun {
        x,
        fx,
        evals,
        converged,
    }
}

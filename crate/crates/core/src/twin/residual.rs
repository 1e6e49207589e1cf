//! Learned next-state corrections on top of the physics core.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::mlp::{Adam, Mlp};
use crate::error::{Error, Result};
use crate::plant::{self, field, ControlAction, ExogenousInput, PlantConfig, PlantState, STATE_DIM};

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

/// Width of the regressor input: state, CHWS, mean SAT, mean fan, load, wet bulb.
pub const INPUT_DIM: usize = STATE_DIM + 5;

/// Smallest dataset `fit_residual` accepts.
pub const MIN_TRANSITIONS: usize = 50;

/// Physics-informed penalties added to the data loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PimlConfig {
    pub lambda: f64,
    /// Corrected coil heat must still equal IT load minus stored hot-aisle heat.
    pub energy_balance: bool,
    /// Corrected component powers must stay non-negative.
    pub nonnegative_power: bool,
}

impl Default for PimlConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            energy_balance: true,
            nonnegative_power: true,
        }
    }
}

impl PimlConfig {
    pub fn data_only() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: 32,
            epochs: 500,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 7,
        }
    }
}

/// Per-dimension affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    fn fit(rows: &[Vec<f64>], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for r in rows {
            for i in 0..dim {
                std[i] += (r[i] - mean[i]).powi(2) / n;
            }
        }
        for (s, m) in std.iter_mut().zip(&mean) {
            *s = s.sqrt();
            if !(*s > 1e-9 * (1.0 + m.abs())) {
                *s = 0.0;
            }
        }
        Self { mean, std }
    }

    fn is_constant(&self) -> bool {
        self.std.iter().all(|&s| s == 0.0)
    }

    /// Divisor used for dimension `i`; constant dimensions pass through.
    fn scale(&self, i: usize) -> f64 {
        if self.std[i] > 0.0 {
            self.std[i]
        } else {
            1.0
        }
    }

    fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i]) / self.scale(i))
            .collect()
    }
}

/// Bootstrap ensemble of residual regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEnsemble {
    pub schema_version: u32,
    pub members: Vec<Mlp>,
    pub inputs: Scaler,
    pub targets: Scaler,
    /// Next-state statistics used to z-score member disagreement.
    pub states: Scaler,
    /// Loss of each member's kept checkpoint.
    pub final_loss: Vec<f64>,
    /// Best-so-far loss after every epoch, per member.
    pub loss_curves: Vec<Vec<f64>>,
    /// Targets had no variance; every member returns the mean correction.
    pub degenerate: bool,
}

/// Regressor input for one `(s, a, exo)`.
pub fn features(s: &PlantState, a: &ControlAction, exo: &ExogenousInput) -> Vec<f64> {
    let mut x = s.to_vec().to_vec();
    x.extend([
        a.chw_supply_setpoint,
        a.mean_sat(),
        a.mean_fan(),
        exo.it_load,
        exo.outdoor_wetbulb,
    ]);
    x
}

struct Sample {
    x: Vec<f64>,
    /// Normalized target.
    y: Vec<f64>,
    /// Physics prediction, for the non-negativity penalty.
    physics: [f64; STATE_DIM],
}

/// Physics weights needed to turn a normalized output into a penalty.
struct PhysicsLoss<'a> {
    piml: &'a PimlConfig,
    targets: &'a Scaler,
    /// `C_hot / dt`, kW/K.
    hot_rate: f64,
    heat_scale: f64,
    power_scale: f64,
}

impl PhysicsLoss<'_> {
    fn correction(&self, i: usize, o: f64) -> f64 {
        self.targets.mean[i] + self.targets.scale(i) * o
    }

    /// Returns the physics penalty (without λ) and adds `λ·∂/∂o` into `d`.
    fn eval(&self, sample: &Sample, o: &[f64], d: &mut [f64]) -> f64 {
        let lambda = self.piml.lambda;
        let mut pen = 0.0;
        if self.piml.energy_balance {
            let r_coil = self.correction(field::COIL_HEAT, o[field::COIL_HEAT]);
            let r_ret = self.correction(field::RETURN_AIR, o[field::RETURN_AIR]);
            let v = (r_coil + self.hot_rate * r_ret) / self.heat_scale;
            pen += v * v;
            d[field::COIL_HEAT] +=
                lambda * 2.0 * v * self.targets.scale(field::COIL_HEAT) / self.heat_scale;
            d[field::RETURN_AIR] += lambda * 2.0 * v * self.hot_rate
                * self.targets.scale(field::RETURN_AIR)
                / self.heat_scale;
        }
        if self.piml.nonnegative_power {
            for i in field::POWERS {
                let p = sample.physics[i] + self.correction(i, o[i]);
                if p < 0.0 {
                    let v = -p / self.power_scale;
                    pen += v * v;
                    d[i] -= lambda * 2.0 * v * self.targets.scale(i) / self.power_scale;
                }
            }
        }
        pen
    }
}

/// Data loss (mean squared error over outputs) and its gradient.
fn data_loss(y: &[f64], o: &[f64], d: &mut [f64]) -> f64 {
    let n = y.len() as f64;
    let mut l = 0.0;
    for k in 0..y.len() {
        let e = o[k] - y[k];
        l += e * e / n;
        d[k] += 2.0 * e / n;
    }
    l
}

/// Fits a bootstrap ensemble of residuals `s' − step(s, a, exo; cfg)`.
pub fn fit_residual(
    data: &Dataset,
    cfg: &PlantConfig,
    piml: &PimlConfig,
    train: &TrainConfig,
) -> Result<ResidualEnsemble> {
    if data.len() < MIN_TRANSITIONS {
        return Err(Error::Dataset(format!(
            "need at least {MIN_TRANSITIONS} transitions, got {}",
            data.len()
        )));
    }
    if train.members < 2 {
        return Err(Error::Config("ensemble needs at least 2 members".into()));
    }
    if !(piml.lambda >= 0.0) {
        return Err(Error::Config("piml lambda must be >= 0".into()));
    }
    if train.epochs == 0 || train.batch_size == 0 || train.hidden == 0 {
        return Err(Error::Config("epochs, batch_size and hidden must be > 0".into()));
    }

    let mut xs = Vec::with_capacity(data.len());
    let mut raw_targets = Vec::with_capacity(data.len());
    let mut physics = Vec::with_capacity(data.len());
    let mut next_states = Vec::with_capacity(data.len());
    for tr in &data.transitions {
        let p = plant::step(&tr.s, &tr.a, &tr.exo, cfg)?.to_vec();
        let nxt = tr.s_next.to_vec();
        raw_targets.push((0..STATE_DIM).map(|i| nxt[i] - p[i]).collect::<Vec<_>>());
        xs.push(features(&tr.s, &tr.a, &tr.exo));
        physics.push(p);
        next_states.push(nxt.to_vec());
    }
    let inputs = Scaler::fit(&xs, INPUT_DIM);
    let targets = Scaler::fit(&raw_targets, STATE_DIM);
    let states = Scaler::fit(&next_states, STATE_DIM);

    if targets.is_constant() {
        log::warn!("residual targets have zero variance; returning a constant-mean ensemble");
        let zero = vec![0.0; STATE_DIM];
        return Ok(ResidualEnsemble {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            members: (0..train.members)
                .map(|_| Mlp::constant(INPUT_DIM, train.hidden, &zero))
                .collect(),
            inputs,
            targets,
            states,
            final_loss: vec![0.0; train.members],
            loss_curves: vec![Vec::new(); train.members],
            degenerate: true,
        });
    }

    let samples: Vec<Sample> = xs
        .iter()
        .zip(&raw_targets)
        .zip(&physics)
        .map(|((x, y), p)| Sample {
            x: inputs.normalize(x),
            y: targets.normalize(y),
            physics: *p,
        })
        .collect();
    let mean_power =
        data.transitions.iter().map(|t| t.s_next.total_power()).sum::<f64>() / data.len() as f64;
    let loss = PhysicsLoss {
        piml,
        targets: &targets,
        hot_rate: cfg.zone_heat_capacity.hot_aisle / cfg.timestep,
        heat_scale: cfg.design_it_load.max(1.0),
        power_scale: mean_power.max(1.0),
    };

    let trained: Vec<(Mlp, Vec<f64>)> = (0..train.members)
        .into_par_iter()
        .map(|m| train_member(&samples, &loss, train, m as u64))
        .collect();

    let final_loss = trained
        .iter()
        .map(|(_, c)| c.last().copied().unwrap_or(f64::NAN))
        .collect::<Vec<_>>();
    if let Some(bad) = final_loss.iter().find(|l| !l.is_finite()) {
        return Err(Error::Diverged(format!("residual training loss {bad}")));
    }
    let (members, loss_curves) = trained.into_iter().unzip();
    Ok(ResidualEnsemble {
        schema_version: ENSEMBLE_SCHEMA_VERSION,
        members,
        inputs,
        targets,
        states,
        final_loss,
        loss_curves,
        degenerate: false,
    })
}

fn train_member(
    samples: &[Sample],
    loss: &PhysicsLoss,
    train: &TrainConfig,
    member: u64,
) -> (Mlp, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_mul(0x9E37_79B9).wrapping_add(member));
    let n = samples.len();
    let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut net = Mlp::new(INPUT_DIM, train.hidden, STATE_DIM, &mut rng);
    let mut opt = Adam::new(net.n_params(), train.learning_rate);
    let lambda = loss.piml.lambda;

    let objective = |id: usize, o: &[f64], d: &mut [f64]| -> f64 {
        let s = &samples[id];
        let mut l = data_loss(&s.y, o, d);
        if lambda > 0.0 {
            l += lambda * loss.eval(s, o, d);
        }
        l
    };
    let full_loss = |net: &Mlp| -> f64 {
        let inputs: Vec<&[f64]> = boot.iter().map(|&i| samples[i].x.as_slice()).collect();
        net.batch_gradient(&inputs, &boot, objective).0
    };

    let mut best = full_loss(&net);
    let mut best_weights = net.weights.clone();
    let mut curve = Vec::with_capacity(train.epochs);
    let mut order = boot.clone();
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| samples[i].x.as_slice()).collect();
            let (_, grad) = net.batch_gradient(&inputs, batch, objective);
            opt.step(&mut net.weights, &grad);
        }
        let l = full_loss(&net);
        if l < best {
            best = l;
            best_weights.clone_from(&net.weights);
        }
        curve.push(best);
    }
    net.weights = best_weights;
    (net, curve)
}

impl ResidualEnsemble {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "ensemble schema_version {} (expected {ENSEMBLE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.k() < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        for m in &self.members {
            if m.n_in != INPUT_DIM {
                return Err(Error::Dimension {
                    expected: INPUT_DIM,
                    got: m.n_in,
                });
            }
            if m.n_out != STATE_DIM {
                return Err(Error::Dimension {
                    expected: STATE_DIM,
                    got: m.n_out,
                });
            }
        }
        Ok(())
    }

    /// Raw corrections of every member for one input.
    pub fn corrections(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Vec<[f64; STATE_DIM]> {
        let x = self.inputs.normalize(&features(s, a, exo));
        self.members
            .iter()
            .map(|m| {
                let o = m.forward(&x);
                let mut r = [0.0; STATE_DIM];
                for i in 0..STATE_DIM {
                    r[i] = self.targets.mean[i] + self.targets.scale(i) * o[i];
                }
                r
            })
            .collect()
    }

    /// Scale applied to field `i` when measuring disagreement.
    pub fn state_scale(&self, i: usize) -> f64 {
        self.states.scale(i)
    }

    /// Mean squared energy-balance violation of the mean correction, in
    /// units of the design load squared.
    pub fn energy_violation(&self, data: &Dataset, cfg: &PlantConfig) -> f64 {
        let hot_rate = cfg.zone_heat_capacity.hot_aisle / cfg.timestep;
        let scale = cfg.design_it_load.max(1.0);
        let mut total = 0.0;
        for tr in &data.transitions {
            let rs = self.corrections(&tr.s, &tr.a, &tr.exo);
            let k = rs.len() as f64;
            let coil = rs.iter().map(|r| r[field::COIL_HEAT]).sum::<f64>() / k;
            let ret = rs.iter().map(|r| r[field::RETURN_AIR]).sum::<f64>() / k;
            total += ((coil + hot_rate * ret) / scale).powi(2);
        }
        total / data.len().max(1) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let e: Self = serde_json::from_str(&text)?;
        e.validate()?;
        Ok(e)
    }
}

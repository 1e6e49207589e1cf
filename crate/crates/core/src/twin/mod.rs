//! Hybrid digital twin: the physics core under calibrated parameters plus an
//! optional learned residual ensemble.

mod assimilate;
mod calibrate;
mod dataset;
pub mod metrics;
pub mod mlp;
mod params;
mod pessimism;
pub mod residual;
mod rollout;

use std::sync::Arc;

pub use assimilate::{assimilate, StateEstimate};
pub use calibrate::{
    calibrate, calibration_objective, CalibrationConfig, CalibrationResult, LossKind,
};
pub use dataset::{explore, Dataset, Provenance, Transition};
pub use metrics::{feature_mape, mape, Feature, Mape};
pub use params::{BoundedParam, ParamName, TwinParams};
pub use pessimism::{disagreement_quantile, pessimize, PessimisticTwin, UncertaintyConfig};
pub use residual::{fit_residual, PimlConfig, ResidualEnsemble, TrainConfig};
pub use rollout::{
    rollout, ActionSource, ClosedLoop, Controller, Hold, ModelStep, Sequence, TwinModel,
};

use crate::error::{Error, Result};
use crate::plant::{self, ControlAction, ExogenousInput, PlantConfig, PlantState, STATE_DIM};

/// One-step twin output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub physics: PlantState,
    /// Physics plus each member's correction. Just the physics step when
    /// the twin has no ensemble.
    pub members: Vec<PlantState>,
    pub mean: PlantState,
    /// Largest pairwise z-scored distance between member corrections.
    pub disagreement: f64,
}

#[derive(Debug, Clone)]
pub struct Twin {
    base: PlantConfig,
    params: TwinParams,
    cfg: PlantConfig,
    ensemble: Option<Arc<ResidualEnsemble>>,
    params_version: u64,
}

impl Twin {
    pub fn new(base: PlantConfig, params: TwinParams) -> Result<Self> {
        params.validate()?;
        let cfg = params.apply(&base);
        cfg.validate()?;
        Ok(Self {
            base,
            params,
            cfg,
            ensemble: None,
            params_version: 0,
        })
    }

    /// A physics-only twin whose parameters are exactly those of `cfg`.
    pub fn from_config(cfg: PlantConfig) -> Result<Self> {
        let params = TwinParams::from_config(&cfg);
        Self::new(cfg, params)
    }

    pub fn with_ensemble(mut self, ensemble: Arc<ResidualEnsemble>) -> Result<Self> {
        ensemble.validate()?;
        self.ensemble = Some(ensemble);
        Ok(self)
    }

    pub fn without_ensemble(&self) -> Self {
        Self {
            ensemble: None,
            ..self.clone()
        }
    }

    /// Replaces θ and bumps the parameter version.
    pub fn set_params(&mut self, params: TwinParams) -> Result<()> {
        params.validate()?;
        let cfg = params.apply(&self.base);
        cfg.validate()?;
        self.params = params;
        self.cfg = cfg;
        self.params_version += 1;
        Ok(())
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TwinParams {
        &self.params
    }

    pub fn ensemble(&self) -> Option<&Arc<ResidualEnsemble>> {
        self.ensemble.as_ref()
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }

    pub fn predict(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<Prediction> {
        if s.halted {
            let h = PlantState::halt();
            return Ok(Prediction {
                physics: h.clone(),
                members: vec![h.clone()],
                mean: h,
                disagreement: 0.0,
            });
        }
        let physics = plant::step(s, a, exo, &self.cfg)?;
        let Some(ens) = &self.ensemble else {
            return Ok(Prediction {
                members: vec![physics.clone()],
                mean: physics.clone(),
                physics,
                disagreement: 0.0,
            });
        };
        let base = physics.to_vec();
        let corrections = ens.corrections(s, a, exo);
        let k = corrections.len() as f64;
        let mut mean_r = [0.0; STATE_DIM];
        let mut members = Vec::with_capacity(corrections.len());
        for r in &corrections {
            let mut v = base;
            for i in 0..STATE_DIM {
                v[i] += r[i];
                mean_r[i] += r[i] / k;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    field: "member prediction",
                });
            }
            members.push(PlantState::from_vec(&v, physics.sim_time));
        }
        let disagreement = max_pairwise(&corrections, |i| ens.state_scale(i));
        let mut mean = base;
        for i in 0..STATE_DIM {
            mean[i] += mean_r[i];
        }
        Ok(Prediction {
            mean: PlantState::from_vec(&mean, physics.sim_time),
            members,
            physics,
            disagreement,
        })
    }

    pub fn disagreement(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<f64> {
        Ok(self.predict(s, a, exo)?.disagreement)
    }
}

/// Largest Euclidean distance between any two vectors after dividing each
/// coordinate by `scale(i)`.
pub fn max_pairwise(vs: &[[f64; STATE_DIM]], scale: impl Fn(usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    for (a, va) in vs.iter().enumerate() {
        for vb in &vs[a + 1..] {
            let d2: f64 = (0..STATE_DIM)
                .map(|i| ((va[i] - vb[i]) / scale(i)).powi(2))
                .sum();
            best = best.max(d2.sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests;

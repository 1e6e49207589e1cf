use serde::{Deserialize, Serialize};

use super::{Dataset, ModelStep, Twin, TwinModel};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{ControlAction, ExogenousInput, PlantState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyConfig {
    /// Member disagreement (z-scored next-state distance) above which a
    /// transition is routed to HALT.
    pub disagreement_threshold: f64,
    /// κ: HALT pays `−halt_penalty` every step, forever.
    pub halt_penalty: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            disagreement_threshold: 1.0,
            halt_penalty: 200.0,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.disagreement_threshold > 0.0) {
            return Err(Error::Config("disagreement_threshold must be > 0".into()));
        }
        if !(self.halt_penalty > 0.0 && self.halt_penalty.is_finite()) {
            return Err(Error::Config("halt_penalty must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// A twin that sends uncertain transitions to an absorbing HALT state.
#[derive(Debug, Clone)]
pub struct PessimisticTwin {
    pub twin: Twin,
    pub ucfg: UncertaintyConfig,
}

pub fn pessimize(twin: Twin, ucfg: UncertaintyConfig) -> Result<PessimisticTwin> {
    ucfg.validate()?;
    Ok(PessimisticTwin { twin, ucfg })
}

impl TwinModel for PessimisticTwin {
    fn transition(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<ModelStep> {
        if s.halted {
            return Ok(halt_step());
        }
        let p = self.twin.predict(s, a, exo)?;
        if p.disagreement > self.ucfg.disagreement_threshold {
            return Ok(halt_step());
        }
        Ok(ModelStep {
            next: p.mean,
            members: p.members,
        })
    }

    fn reward(&self, spec: &MdpSpec, next: &PlantState) -> f64 {
        if next.halted {
            -self.ucfg.halt_penalty
        } else {
            spec.reward(next)
        }
    }
}

fn halt_step() -> ModelStep {
    ModelStep {
        next: PlantState::halt(),
        members: Vec::new(),
    }
}

/// The `q`-quantile of member disagreement over the transitions in `data`.
/// A threshold calibrated this way keeps HALT away from well-covered data.
pub fn disagreement_quantile(twin: &Twin, data: &Dataset, q: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let mut d = data
        .transitions
        .iter()
        .map(|t| twin.disagreement(&t.s, &t.a, &t.exo))
        .collect::<Result<Vec<_>>>()?;
    d.sort_by(f64::total_cmp);
    let idx = ((q.clamp(0.0, 1.0) * (d.len() - 1) as f64).round()) as usize;
    Ok(d[idx])
}

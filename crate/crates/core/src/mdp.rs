//! Reward, return and trajectory bookkeeping shared by the twin, the agents
//! and the safety layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{ControlAction, PlantState};
use crate::safety::SlaEnvelope;

/// Discount, horizon and reward definition of the control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpSpec {
    pub gamma: f64,
    pub horizon: usize,
    /// Reward units per (°C or RH point) of excursion per step.
    pub penalty_weight: f64,
    /// Envelope the reward penalizes. Usually a tightened copy of the SLA.
    pub target: SlaEnvelope,
    /// Control interval, s.
    pub timestep: f64,
}

impl Default for MdpSpec {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            horizon: 3,
            penalty_weight: 50.0,
            target: SlaEnvelope::default().tightened(0.5, 2.0),
            timestep: 900.0,
        }
    }
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.penalty_weight > 0.0) {
            return Err(Error::Config("penalty_weight must be > 0".into()));
        }
        Ok(())
    }

    /// Reward earned on arriving in `next`: negative energy (kWh) minus the
    /// weighted envelope excursion.
    pub fn reward(&self, next: &PlantState) -> f64 {
        let energy = next.total_power() * self.timestep / 3600.0;
        -energy - self.penalty_weight * self.target.violation_for(next)
    }
}

/// `Σ γ^t r_t`.
///
/// ```
/// use dlcf_core::mdp::discounted_return;
/// assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
/// ```
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, &r| r + gamma * acc)
}

/// Value of an absorbing state paying `reward` forever: `reward / (1 - γ)`.
pub fn absorbing_value(reward: f64, gamma: f64) -> f64 {
    reward / (1.0 - gamma)
}

/// Energy in kWh of a sequence of mean powers (kW) over steps of `dt` s.
pub fn energy_kwh(powers_kw: impl IntoIterator<Item = f64>, dt: f64) -> f64 {
    powers_kw.into_iter().sum::<f64>() * dt / 3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub action: ControlAction,
    /// State reached after applying `action`.
    pub state: PlantState,
    pub reward: f64,
    pub constraint: f64,
    pub sla_ok: bool,
    /// Some ensemble member's prediction left the envelope.
    pub member_violation: bool,
}

/// A finite rollout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub energy_kwh: f64,
    /// Discounted return, including the absorbing tail if HALT was entered.
    pub ret: f64,
    /// Index of the step that entered HALT, if any.
    pub halted_at: Option<usize>,
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn all_compliant(&self) -> bool {
        self.failure.is_none() && self.steps.iter().all(|s| s.sla_ok)
    }

    pub fn inlet_range(&self) -> (f64, f64) {
        min_max(self.physical().map(|s| s.state.cold_aisle_temp))
    }

    pub fn rh_range(&self) -> (f64, f64) {
        min_max(self.physical().map(|s| s.state.inlet_rh()))
    }

    fn physical(&self) -> impl Iterator<Item = &TrajectoryStep> {
        self.steps.iter().filter(|s| !s.state.halted)
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

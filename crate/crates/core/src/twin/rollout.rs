use super::Twin;
use crate::error::{Error, Result};
use crate::mdp::{absorbing_value, discounted_return, MdpSpec, Trajectory, TrajectoryStep};
use crate::plant::{self, ControlAction, ExogenousInput, PlantConfig, PlantState};
use crate::safety::SlaEnvelope;

/// Result of one model transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub next: PlantState,
    /// Per-member predictions; a single entry for deterministic models.
    pub members: Vec<PlantState>,
}

/// Anything that can play the role of `M(s' | s, a)` in a rollout.
pub trait TwinModel: Sync {
    fn transition(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<ModelStep>;

    /// Reward for arriving in `next`.
    fn reward(&self, spec: &MdpSpec, next: &PlantState) -> f64 {
        spec.reward(next)
    }
}

impl TwinModel for Twin {
    fn transition(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<ModelStep> {
        let p = self.predict(s, a, exo)?;
        Ok(ModelStep {
            next: p.mean,
            members: p.members,
        })
    }
}

/// The bare physics core under a fixed configuration.
impl TwinModel for PlantConfig {
    fn transition(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<ModelStep> {
        let next = plant::step(s, a, exo, self)?;
        Ok(ModelStep {
            members: vec![next.clone()],
            next,
        })
    }
}

impl<M: TwinModel + Send> TwinModel for std::sync::Arc<M> {
    fn transition(
        &self,
        s: &PlantState,
        a: &ControlAction,
        exo: &ExogenousInput,
    ) -> Result<ModelStep> {
        (**self).transition(s, a, exo)
    }

    fn reward(&self, spec: &MdpSpec, next: &PlantState) -> f64 {
        (**self).reward(spec, next)
    }
}

/// Supplies the action for step `k` of a rollout.
pub trait ActionSource {
    fn next_action(
        &mut self,
        k: usize,
        s: &PlantState,
        exo: &ExogenousInput,
    ) -> Result<ControlAction>;
}

/// A state-feedback control law.
pub trait Controller: Sync {
    fn act(&self, s: &PlantState, exo: &ExogenousInput) -> Result<ControlAction>;
}

/// Runs a [`Controller`] in closed loop.
pub struct ClosedLoop<'a>(pub &'a dyn Controller);

impl ActionSource for ClosedLoop<'_> {
    fn next_action(&mut self, _: usize, s: &PlantState, exo: &ExogenousInput) -> Result<ControlAction> {
        self.0.act(s, exo)
    }
}

/// The same action every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Hold(pub ControlAction);

impl ActionSource for Hold {
    fn next_action(&mut self, _: usize, _: &PlantState, _: &ExogenousInput) -> Result<ControlAction> {
        Ok(self.0.clone())
    }
}

/// A fixed open-loop sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence(pub Vec<ControlAction>);

impl ActionSource for Sequence {
    fn next_action(&mut self, k: usize, _: &PlantState, _: &ExogenousInput) -> Result<ControlAction> {
        self.0
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("action sequence has no step {k}")))
    }
}

/// Simulates `horizon` steps of `model` from `s0`.
///
/// Rewards come from `model.reward`; SLA flags are judged against `sla`.
/// Entering HALT ends the rollout: the return then adds the absorbing tail
/// `γ^e · r_halt / (1 − γ)` in place of the remaining steps. A failed or
/// non-finite step truncates the trajectory and sets `failure`.
pub fn rollout<M, A>(
    model: &M,
    s0: &PlantState,
    source: &mut A,
    forecast: &[ExogenousInput],
    horizon: usize,
    spec: &MdpSpec,
    sla: &SlaEnvelope,
) -> Trajectory
where
    M: TwinModel + ?Sized,
    A: ActionSource + ?Sized,
{
    let mut traj = Trajectory::default();
    if forecast.len() < horizon {
        traj.failure = Some(format!(
            "forecast covers {} steps, horizon is {horizon}",
            forecast.len()
        ));
        return traj;
    }
    let mut s = s0.clone();
    let mut rewards = Vec::with_capacity(horizon);
    let mut tail = 0.0;
    for (k, exo) in forecast.iter().take(horizon).enumerate() {
        let outcome = source
            .next_action(k, &s, exo)
            .and_then(|a| model.transition(&s, &a, exo).map(|m| (a, m)));
        let (action, step) = match outcome {
            Ok(v) => v,
            Err(e) => {
                traj.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        if !step.next.halted && step.next.validate().is_err() {
            traj.failure = Some(format!("step {k}: non-finite predicted state"));
            break;
        }
        let reward = model.reward(spec, &step.next);
        let constraint = sla.constraint_for(&step.next);
        let member_violation = step.members.iter().any(|m| !sla.is_compliant(m));
        let halted = step.next.halted;
        if !halted {
            traj.energy_kwh += step.next.total_power() * spec.timestep / 3600.0;
        }
        traj.steps.push(TrajectoryStep {
            action,
            sla_ok: constraint <= sla.tolerance,
            state: step.next.clone(),
            reward,
            constraint,
            member_violation,
        });
        if halted {
            traj.halted_at = Some(k);
            tail = spec.gamma.powi(k as i32) * absorbing_value(reward, spec.gamma);
            break;
        }
        rewards.push(reward);
        s = step.next;
    }
    traj.ret = discounted_return(&rewards, spec.gamma) + tail;
    traj
}

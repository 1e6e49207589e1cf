use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ActionBounds, SlaEnvelope};
use crate::error::{Error, Result};
use crate::mdp::{MdpSpec, Trajectory};
use crate::plant::{ControlAction, ExogenousInput, PlantState};
use crate::twin::{rollout, ActionSource, Controller, TwinModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// What a candidate proposes: a setpoint held over the horizon, or a
/// control law run in closed loop.
#[derive(Clone, Copy)]
pub enum CandidatePlan<'a> {
    Action(&'a ControlAction),
    Policy(&'a dyn Controller),
}

#[derive(Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub plan: CandidatePlan<'a>,
}

impl<'a> Candidate<'a> {
    pub fn action(id: &'a str, action: &'a ControlAction) -> Self {
        Self {
            id,
            plan: CandidatePlan::Action(action),
        }
    }

    pub fn policy(id: &'a str, policy: &'a dyn Controller) -> Self {
        Self {
            id,
            plan: CandidatePlan::Policy(policy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Selected,
    Filtered,
    /// Compliant but beaten by another survivor.
    Passed,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub candidate_id: String,
    pub projected_action: ControlAction,
    pub energy_kwh: f64,
    pub min_inlet_c: Option<f64>,
    pub max_inlet_c: Option<f64>,
    pub min_rh_pct: Option<f64>,
    pub max_rh_pct: Option<f64>,
    /// Discounted return of the predicted trajectory; partial when the
    /// rollout failed.
    pub predicted_return: f64,
    /// Every predicted step inside the SLA envelope.
    pub sla_compliant: bool,
    /// Some ensemble member left the envelope on some step.
    pub member_violation: bool,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreEvalConfig {
    pub horizon: usize,
    pub envelope: SlaEnvelope,
    /// Filter a candidate when any ensemble member predicts a violation.
    pub strict: bool,
}

impl Default for PreEvalConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            envelope: SlaEnvelope::default(),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub action: ControlAction,
    pub selected_id: String,
    pub fallback: bool,
    /// One report per candidate (plus the fallback if it was not a
    /// candidate), sorted by id.
    pub reports: Vec<EvaluationReport>,
}

impl Selection {
    pub fn report(&self, id: &str) -> Option<&EvaluationReport> {
        self.reports.iter().find(|r| r.candidate_id == id)
    }

    pub fn selected_report(&self) -> Option<&EvaluationReport> {
        self.report(&self.selected_id)
    }
}

/// Projects every action a source emits.
struct Projected<'a, A> {
    inner: A,
    bounds: &'a ActionBounds,
}

impl<A: ActionSource> ActionSource for Projected<'_, A> {
    fn next_action(&mut self, k: usize, s: &PlantState, exo: &ExogenousInput) -> Result<ControlAction> {
        let a = self.inner.next_action(k, s, exo)?;
        self.bounds.project(&a)
    }
}

struct PlanSource<'a>(CandidatePlan<'a>);

impl ActionSource for PlanSource<'_> {
    fn next_action(&mut self, _: usize, s: &PlantState, exo: &ExogenousInput) -> Result<ControlAction> {
        match self.0 {
            CandidatePlan::Action(a) => Ok(a.clone()),
            CandidatePlan::Policy(p) => p.act(s, exo),
        }
    }
}

fn evaluate_one<M: TwinModel + ?Sized>(
    model: &M,
    cand: &Candidate,
    s0: &PlantState,
    forecast: &[ExogenousInput],
    spec: &MdpSpec,
    bounds: &ActionBounds,
    cfg: &PreEvalConfig,
) -> EvaluationReport {
    let mut src = Projected {
        inner: PlanSource(cand.plan),
        bounds,
    };
    let first = forecast
        .first()
        .ok_or_else(|| Error::Config("empty forecast".into()))
        .and_then(|exo| src.next_action(0, s0, exo));
    let traj = match &first {
        Ok(_) => rollout(model, s0, &mut src, forecast, cfg.horizon, spec, &cfg.envelope),
        Err(e) => Trajectory {
            failure: Some(e.to_string()),
            ..Trajectory::default()
        },
    };
    let projected_action = match first {
        Ok(a) => a,
        Err(_) => match cand.plan {
            CandidatePlan::Action(a) => ControlAction::from_flat(&super::project_flat(
                &a.to_flat(),
                &bounds.lo,
                &bounds.hi,
            ))
            .unwrap_or_else(|_| a.clone()),
            CandidatePlan::Policy(_) => {
                ControlAction::from_flat(&bounds.lo).expect("bounds have a valid layout")
            }
        },
    };
    report_for(cand.id, projected_action, &traj, cfg)
}

fn report_for(id: &str, projected_action: ControlAction, traj: &Trajectory, cfg: &PreEvalConfig) -> EvaluationReport {
    let finite = |v: f64| v.is_finite().then_some(v);
    let (lo_t, hi_t) = traj.inlet_range();
    let (lo_rh, hi_rh) = traj.rh_range();
    let (min_inlet_c, max_inlet_c) = (finite(lo_t), finite(hi_t));
    let (min_rh_pct, max_rh_pct) = (finite(lo_rh), finite(hi_rh));
    let complete = traj.failure.is_none() && traj.len() == cfg.horizon;
    let sla_compliant = complete && traj.all_compliant();
    let member_violation = traj.steps.iter().any(|s| s.member_violation);
    let diagnostic = if let Some(f) = &traj.failure {
        Some(format!("rollout failed: {f}"))
    } else if !sla_compliant {
        Some("predicted SLA violation".to_string())
    } else if cfg.strict && member_violation {
        Some("ensemble member predicts SLA violation".to_string())
    } else {
        None
    };
    let passes = diagnostic.is_none();
    EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        candidate_id: id.to_string(),
        projected_action,
        energy_kwh: traj.energy_kwh,
        min_inlet_c,
        max_inlet_c,
        min_rh_pct,
        max_rh_pct,
        predicted_return: traj.ret,
        sla_compliant,
        member_violation,
        verdict: if passes { Verdict::Passed } else { Verdict::Filtered },
        diagnostic,
    }
}

/// Projects and rolls out every candidate on `model`, drops those with a
/// predicted violation, and selects the best survivor by predicted return.
/// Ties go to the smallest id. With no survivor the `fallback` candidate's
/// action is selected and its report marked [`Verdict::Fallback`].
#[allow(clippy::too_many_arguments)]
pub fn pre_evaluate<M: TwinModel + ?Sized>(
    model: &M,
    candidates: &[Candidate],
    fallback: &Candidate,
    s0: &PlantState,
    forecast: &[ExogenousInput],
    spec: &MdpSpec,
    bounds: &ActionBounds,
    cfg: &PreEvalConfig,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("pre_evaluate needs at least one candidate".into()));
    }
    let mut ids: Vec<&str> = candidates.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].to_string()));
    }

    let mut reports: Vec<EvaluationReport> = candidates
        .par_iter()
        .map(|c| evaluate_one(model, c, s0, forecast, spec, bounds, cfg))
        .collect();
    reports.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));

    let winner = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.verdict == Verdict::Passed)
        .fold(None::<(usize, f64)>, |best, (i, r)| match best {
            Some((_, ret)) if ret >= r.predicted_return => best,
            _ => Some((i, r.predicted_return)),
        });

    if let Some((i, _)) = winner {
        reports[i].verdict = Verdict::Selected;
        return Ok(Selection {
            action: reports[i].projected_action.clone(),
            selected_id: reports[i].candidate_id.clone(),
            fallback: false,
            reports,
        });
    }

    let idx = match reports.iter().position(|r| r.candidate_id == fallback.id) {
        Some(i) => i,
        None => {
            let r = evaluate_one(model, fallback, s0, forecast, spec, bounds, cfg);
            let pos = reports.partition_point(|x| x.candidate_id.as_str() < fallback.id);
            reports.insert(pos, r);
            pos
        }
    };
    reports[idx].verdict = Verdict::Fallback;
    Ok(Selection {
        action: reports[idx].projected_action.clone(),
        selected_id: fallback.id.to_string(),
        fallback: true,
        reports,
    })
}

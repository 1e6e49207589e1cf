//! SLA constraints, safe-action projection and twin pre-evaluation.

mod bounds;
mod envelope;
mod preeval;

pub use bounds::{
    project_flat, ActionBounds, Scope, BASELINE_CHWS, CHWS_LIMITS, FAN_LIMITS, SAT_LIMITS,
};
pub use envelope::{Interval, SlaEnvelope};
pub use preeval::{
    pre_evaluate, Candidate, CandidatePlan, EvaluationReport, PreEvalConfig, Selection, Verdict,
    REPORT_SCHEMA_VERSION,
};

/// Nearest point of `bounds` to `action` (a per-dimension clamp).
pub fn project(
    action: &crate::plant::ControlAction,
    bounds: &ActionBounds,
) -> crate::Result<crate::plant::ControlAction> {
    bounds.project(action)
}

//! Control policies and the procedures that train them.

pub mod grid;
mod offline;
pub mod planner;
mod policy;
pub mod qlearn;

pub use grid::{ActionGrid, Setpoint};
pub use offline::{distill, train_offline_pessimistic, train_with_ensemble, OfflineConfig, OfflineOutcome};
pub use planner::{plan, sequence_return, CrossEntropyConfig, PlanResult, PlanningModel, SearchMode, ToyMdp, TwinPlanning};
pub use policy::{
    baseline_policy, planner_policy, ActContext, Bound, Policy, PolicyKind, PolicyParams, StateBins,
    TrainingMeta, BASELINE_SETPOINT,
};
pub use qlearn::{
    model_free_grid, q_learning, train_model_free, write_learning_curve, DiscreteEnv, EnvStep,
    EpisodeStat, ModelFreeConfig, ModelFreeOutcome, QConfig, QResult,
};

//! Offline model-based learning inside a pessimized twin.
//!
//! The ensemble is fit to a fixed dataset, the twin routes transitions the
//! ensemble disagrees on to HALT, and a planner is distilled into one
//! setpoint per state bin using the dataset's own states as start points.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::grid::{ActionGrid, Setpoint};
use super::planner::{plan, PlanningModel, SearchMode, TwinPlanning};
use super::policy::{Policy, PolicyKind, PolicyParams, StateBins, TrainingMeta, BASELINE_SETPOINT};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{ExogenousInput, PlantConfig, PlantState};
use crate::safety::Scope;
use crate::twin::{
    fit_residual, pessimize, Dataset, PimlConfig, ResidualEnsemble, TrainConfig, Twin, TwinModel,
    UncertaintyConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub scope: Scope,
    pub train: TrainConfig,
    pub piml: PimlConfig,
    pub bins: StateBins,
    pub search: SearchMode,
    /// Dataset states per bin used as planning start points.
    pub starts_per_bin: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            scope: Scope::CrahOnly,
            train: TrainConfig::default(),
            piml: PimlConfig::default(),
            bins: StateBins::default(),
            search: SearchMode::Hold,
            starts_per_bin: 3,
        }
    }
}

pub struct OfflineOutcome {
    pub policy: Policy,
    pub ensemble: Arc<ResidualEnsemble>,
}

/// Plans jointly from several start states; the reward is their mean.
struct MultiStart<'a> {
    inner: Vec<TwinPlanning<'a>>,
}

impl PlanningModel for MultiStart<'_> {
    type State = Vec<PlantState>;

    fn step(&self, k: usize, s: &Vec<PlantState>, a: &Setpoint) -> Result<(Vec<PlantState>, f64)> {
        let mut next = Vec::with_capacity(s.len());
        let mut total = 0.0;
        for (m, si) in self.inner.iter().zip(s) {
            let (n, r) = m.step(k, si, a)?;
            next.push(n);
            total += r;
        }
        Ok((next, total / s.len() as f64))
    }
}

/// Distils a planner running on `model` into a per-bin table. Bins with no
/// data keep the baseline setpoint.
pub fn distill(
    id: &str,
    kind: PolicyKind,
    model: &dyn TwinModel,
    data: &Dataset,
    spec: &MdpSpec,
    n_crah: usize,
    cfg: &OfflineConfig,
) -> Result<Policy> {
    spec.validate()?;
    cfg.bins.validate()?;
    let grid = ActionGrid::for_scope(cfg.scope);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.bins.len()];
    for (i, t) in data.transitions.iter().enumerate() {
        members[cfg.bins.index(&t.s, &t.exo)].push(i);
    }
    let forecasts: Vec<Vec<ExogenousInput>> = data
        .transitions
        .iter()
        .map(|t| vec![t.exo; spec.horizon])
        .collect();
    let mut actions = Vec::with_capacity(cfg.bins.len());
    for idx in &members {
        if idx.is_empty() {
            actions.push(BASELINE_SETPOINT);
            continue;
        }
        let n = cfg.starts_per_bin.clamp(1, idx.len());
        let picks: Vec<usize> = (0..n).map(|j| idx[j * idx.len() / n]).collect();
        let ms = MultiStart {
            inner: picks
                .iter()
                .map(|&i| TwinPlanning {
                    model,
                    forecast: &forecasts[i],
                    spec,
                    n_crah,
                })
                .collect(),
        };
        let s0: Vec<PlantState> = picks.iter().map(|&i| data.transitions[i].s.clone()).collect();
        let r = plan(&ms, &s0, &grid, spec.horizon, spec.gamma, &cfg.search, &[BASELINE_SETPOINT])?;
        actions.push(r.first());
    }
    let policy = Policy {
        id: id.into(),
        kind,
        scope: cfg.scope,
        n_crah,
        params: PolicyParams::Table {
            bins: cfg.bins.clone(),
            actions,
        },
        meta: TrainingMeta {
            seed: cfg.train.seed,
            episodes: 0,
            notes: format!("planner distilled from {} offline transitions", data.len()),
        },
    };
    policy.validate()?;
    Ok(policy)
}

/// Fits an ensemble to `data` on top of the `prior` physics, pessimizes it
/// with `ucfg` and distils a planner inside it. An infinite threshold
/// disables pessimism.
pub fn train_offline_pessimistic(
    id: &str,
    data: &Dataset,
    prior: &PlantConfig,
    ucfg: &UncertaintyConfig,
    spec: &MdpSpec,
    cfg: &OfflineConfig,
) -> Result<OfflineOutcome> {
    if data.is_empty() {
        return Err(Error::Dataset("offline training needs data".into()));
    }
    let ensemble = Arc::new(fit_residual(data, prior, &cfg.piml, &cfg.train)?);
    let policy = train_with_ensemble(id, data, prior, ensemble.clone(), ucfg, spec, cfg)?;
    Ok(OfflineOutcome { policy, ensemble })
}

/// As [`train_offline_pessimistic`] with an already fitted ensemble, so
/// pessimistic and plain variants can share one fit.
pub fn train_with_ensemble(
    id: &str,
    data: &Dataset,
    prior: &PlantConfig,
    ensemble: Arc<ResidualEnsemble>,
    ucfg: &UncertaintyConfig,
    spec: &MdpSpec,
    cfg: &OfflineConfig,
) -> Result<Policy> {
    let twin = Twin::from_config(prior.clone())?.with_ensemble(ensemble)?;
    if ucfg.disagreement_threshold.is_infinite() {
        distill(id, PolicyKind::OfflinePessimistic, &twin, data, spec, prior.n_crah, cfg)
    } else {
        let pt = pessimize(twin, ucfg.clone())?;
        distill(id, PolicyKind::OfflinePessimistic, &pt, data, spec, prior.n_crah, cfg)
    }
}

//! Tabular Q-learning.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::ActionGrid;
use super::policy::{Policy, PolicyKind, PolicyParams, StateBins, TrainingMeta, BASELINE_SETPOINT};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{self, ControlAction, ExoTrace, PlantConfig, PlantState};
use crate::safety::{Scope, SlaEnvelope};
use crate::twin::TwinModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub next: usize,
    pub reward: f64,
    pub violation: bool,
    /// The episode reached a terminal state; nothing follows.
    pub terminal: bool,
    /// The episode hit its time limit; the value of `next` still counts.
    pub truncated: bool,
}

/// A finite MDP driven by the learner.
pub trait DiscreteEnv {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<usize>;
    fn step(&mut self, a: usize, rng: &mut ChaCha8Rng) -> Result<EnvStep>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QConfig {
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Exploration rate, decayed linearly from `epsilon_start` to
    /// `epsilon_end` over the run.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub seed: u64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            alpha: 0.1,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QResult {
    pub q: Vec<Vec<f64>>,
    pub visits: Vec<usize>,
    pub curve: Vec<EpisodeStat>,
}

impl QResult {
    /// Greedy action per state; ties go to the smallest index.
    pub fn greedy(&self) -> Vec<usize> {
        self.q.iter().map(|row| argmax(row)).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn q_learning(env: &mut dyn DiscreteEnv, cfg: &QConfig) -> Result<QResult> {
    let (ns, na) = (env.n_states(), env.n_actions());
    if ns == 0 || na == 0 {
        return Err(Error::Config("environment has no states or actions".into()));
    }
    if !(0.0..1.0).contains(&cfg.gamma) || !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::Config("need gamma in [0, 1) and alpha in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = vec![vec![0.0; na]; ns];
    let mut visits = vec![0; ns];
    let mut curve = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let frac = if cfg.episodes > 1 {
            ep as f64 / (cfg.episodes - 1) as f64
        } else {
            1.0
        };
        let eps = cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac;
        let mut s = env.reset(&mut rng)?;
        let mut ret = 0.0;
        let mut disc = 1.0;
        let mut violations = 0;
        loop {
            let a = if rng.random::<f64>() < eps {
                rng.random_range(0..na)
            } else {
                argmax(&q[s])
            };
            let st = env.step(a, &mut rng)?;
            visits[s] += 1;
            let target = if st.terminal {
                st.reward
            } else {
                st.reward + cfg.gamma * q[st.next].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            q[s][a] += cfg.alpha * (target - q[s][a]);
            if !q[s][a].is_finite() {
                return Err(Error::Diverged(format!(
                    "Q[{s}][{a}] became {} in episode {ep}",
                    q[s][a]
                )));
            }
            ret += disc * st.reward;
            disc *= cfg.gamma;
            violations += st.violation as usize;
            s = st.next;
            if st.terminal || st.truncated {
                break;
            }
        }
        curve.push(EpisodeStat {
            episode: ep,
            ret,
            violations,
        });
    }
    Ok(QResult { q, visits, curve })
}

/// Writes `episode,return,violations`.
pub fn write_learning_curve(curve: &[EpisodeStat], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Episodes on a twin: random start in the trace, warmed up under the
/// baseline, then `episode_len` steps with setpoints drawn from `grid`.
pub struct TwinEnv<'a> {
    pub model: &'a dyn TwinModel,
    pub plant: &'a PlantConfig,
    pub trace: &'a ExoTrace,
    pub spec: &'a MdpSpec,
    pub sla: SlaEnvelope,
    pub grid: &'a ActionGrid,
    pub bins: &'a StateBins,
    pub episode_len: usize,
    k: usize,
    t: usize,
    state: Option<PlantState>,
}

impl<'a> TwinEnv<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a dyn TwinModel,
        plant: &'a PlantConfig,
        trace: &'a ExoTrace,
        spec: &'a MdpSpec,
        grid: &'a ActionGrid,
        bins: &'a StateBins,
        episode_len: usize,
    ) -> Result<Self> {
        if trace.len() <= episode_len {
            return Err(Error::Config("trace shorter than one episode".into()));
        }
        Ok(Self {
            model,
            plant,
            trace,
            spec,
            sla: SlaEnvelope::default(),
            grid,
            bins,
            episode_len,
            k: 0,
            t: 0,
            state: None,
        })
    }

    fn bin(&self) -> usize {
        let s = self.state.as_ref().expect("reset before step");
        self.bins.index(s, &self.trace.at(self.k))
    }
}

impl DiscreteEnv for TwinEnv<'_> {
    fn n_states(&self) -> usize {
        self.bins.len()
    }

    fn n_actions(&self) -> usize {
        self.grid.len()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<usize> {
        self.k = rng.random_range(0..self.trace.len() - self.episode_len);
        self.t = 0;
        let [c, s, f] = BASELINE_SETPOINT;
        let base = ControlAction::uniform(c, s, f, self.plant.n_crah);
        let rest = PlantState::at_rest(22.0, 0.009);
        self.state = Some(plant::settle(rest, &base, &self.trace.at(self.k), self.plant, 20)?);
        Ok(self.bin())
    }

    fn step(&mut self, a: usize, _: &mut ChaCha8Rng) -> Result<EnvStep> {
        let [c, s, f] = self.grid.get(a);
        let action = ControlAction::uniform(c, s, f, self.plant.n_crah);
        let cur = self.state.as_ref().expect("reset before step");
        let next = self.model.transition(cur, &action, &self.trace.at(self.k))?.next;
        let reward = self.model.reward(self.spec, &next);
        let violation = !self.sla.is_compliant(&next);
        self.state = Some(next);
        self.k += 1;
        self.t += 1;
        Ok(EnvStep {
            next: self.bin(),
            reward,
            violation,
            terminal: false,
            truncated: self.t >= self.episode_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelFreeConfig {
    pub q: QConfig,
    pub episode_len: usize,
    pub bins: StateBins,
    /// `None` uses [`model_free_grid`].
    pub grid: Option<ActionGrid>,
}

impl Default for ModelFreeConfig {
    fn default() -> Self {
        Self {
            q: QConfig::default(),
            episode_len: 48,
            bins: StateBins::default(),
            grid: None,
        }
    }
}

/// A coarse grid that keeps the Q-table small enough to learn from a few
/// hundred episodes.
pub fn model_free_grid(scope: Scope) -> ActionGrid {
    let chws = match scope {
        Scope::CrahOnly => vec![BASELINE_SETPOINT[0]],
        Scope::CrahChw => vec![6.0, 7.0, 8.0, 9.0, 10.0],
    };
    ActionGrid {
        chws,
        sat: vec![20.0, 22.0, 24.0],
        fan: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    }
}

pub struct ModelFreeOutcome {
    pub policy: Policy,
    pub curve: Vec<EpisodeStat>,
}

/// Trains a tabular agent on `model` and distils the greedy policy. State
/// bins never visited during training keep the baseline setpoint.
pub fn train_model_free(
    id: &str,
    scope: Scope,
    model: &dyn TwinModel,
    plant: &PlantConfig,
    trace: &ExoTrace,
    spec: &MdpSpec,
    cfg: &ModelFreeConfig,
) -> Result<ModelFreeOutcome> {
    spec.validate()?;
    cfg.bins.validate()?;
    let grid = cfg.grid.clone().unwrap_or_else(|| model_free_grid(scope));
    if grid.is_empty() {
        return Err(Error::Config("model-free grid is empty".into()));
    }
    let mut env = TwinEnv::new(model, plant, trace, spec, &grid, &cfg.bins, cfg.episode_len)?;
    let q = QConfig {
        gamma: spec.gamma,
        ..cfg.q.clone()
    };
    let res = q_learning(&mut env, &q)?;
    let actions = res
        .greedy()
        .into_iter()
        .zip(&res.visits)
        .map(|(a, &n)| if n > 0 { grid.get(a) } else { BASELINE_SETPOINT })
        .collect();
    let policy = Policy {
        id: id.into(),
        kind: PolicyKind::ModelFree,
        scope,
        n_crah: plant.n_crah,
        params: PolicyParams::Table {
            bins: cfg.bins.clone(),
            actions,
        },
        meta: TrainingMeta {
            seed: q.seed,
            episodes: q.episodes,
            notes: format!("tabular Q-learning, {} actions", grid.len()),
        },
    };
    policy.validate()?;
    Ok(ModelFreeOutcome {
        policy,
        curve: res.curve,
    })
}

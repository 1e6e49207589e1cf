//! Finite-horizon planning over an action grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grid::{lex_cmp, ActionGrid, Setpoint};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{ControlAction, ExogenousInput, PlantState};
use crate::twin::TwinModel;

/// A deterministic model the planner can query.
pub trait PlanningModel: Sync {
    type State: Clone;

    /// Next state and reward of applying `a` at step `k` from `s`. An error
    /// marks the action infeasible from `s`.
    fn step(&self, k: usize, s: &Self::State, a: &Setpoint) -> Result<(Self::State, f64)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossEntropyConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Rollout improvement of the best sequence after the last iteration.
    pub polish: bool,
    pub seed: u64,
}

impl Default for CrossEntropyConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elites: 8,
            iterations: 5,
            polish: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SearchMode {
    /// Every action sequence on the grid.
    Exhaustive,
    /// Every grid action held constant over the horizon.
    Hold,
    CrossEntropy(CrossEntropyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub sequence: Vec<Setpoint>,
    pub ret: f64,
    /// Sequences scored.
    pub evaluated: usize,
}

impl PlanResult {
    pub fn first(&self) -> Setpoint {
        self.sequence[0]
    }
}

/// Discounted return of a whole sequence, or `None` if any step is
/// infeasible.
pub fn sequence_return<M: PlanningModel>(
    model: &M,
    s0: &M::State,
    seq: &[Setpoint],
    gamma: f64,
) -> Option<f64> {
    let mut s = s0.clone();
    let mut ret = 0.0;
    let mut disc = 1.0;
    for (k, a) in seq.iter().enumerate() {
        let (n, r) = model.step(k, &s, a).ok()?;
        ret += disc * r;
        disc *= gamma;
        s = n;
    }
    Some(ret)
}

/// True when `(ret, seq)` beats `(best_ret, best)`: higher return, then
/// lexicographically smaller sequence.
fn better(ret: f64, seq: &[Setpoint], best: Option<&(f64, Vec<Setpoint>)>) -> bool {
    match best {
        None => true,
        Some((br, bs)) => {
            ret > *br
                || (ret == *br
                    && seq
                        .iter()
                        .zip(bs)
                        .map(|(a, b)| lex_cmp(a, b))
                        .find(|o| o.is_ne())
                        .is_some_and(|o| o.is_lt()))
        }
    }
}

/// Returns the best `horizon`-step sequence from `s0`.
///
/// `extra` setpoints (typically the baseline) are always scored as held
/// sequences, so the result is never worse than holding any of them.
pub fn plan<M: PlanningModel>(
    model: &M,
    s0: &M::State,
    grid: &ActionGrid,
    horizon: usize,
    gamma: f64,
    mode: &SearchMode,
    extra: &[Setpoint],
) -> Result<PlanResult> {
    if horizon == 0 {
        return Err(Error::Config("planning horizon must be >= 1".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty action grid".into()));
    }
    let mut best: Option<(f64, Vec<Setpoint>)> = None;
    let mut evaluated = 0;
    let mut consider = |seq: Vec<Setpoint>, best: &mut Option<(f64, Vec<Setpoint>)>| {
        evaluated += 1;
        if let Some(r) = sequence_return(model, s0, &seq, gamma) {
            if better(r, &seq, best.as_ref()) {
                *best = Some((r, seq));
            }
        }
    };
    for e in extra {
        consider(vec![*e; horizon], &mut best);
    }
    match mode {
        SearchMode::Hold => {
            for a in grid.iter() {
                consider(vec![a; horizon], &mut best);
            }
        }
        SearchMode::Exhaustive => {
            let (b, n) = exhaustive(model, s0, grid, horizon, gamma);
            evaluated += n;
            if let Some((r, seq)) = b {
                if better(r, &seq, best.as_ref()) {
                    best = Some((r, seq));
                }
            }
        }
        SearchMode::CrossEntropy(ce) => {
            let (b, n) = cross_entropy(model, s0, grid, horizon, gamma, ce, extra);
            evaluated += n;
            if let Some((r, seq)) = b {
                if better(r, &seq, best.as_ref()) {
                    best = Some((r, seq));
                }
            }
        }
    }
    let (ret, sequence) =
        best.ok_or_else(|| Error::Infeasible("every candidate sequence failed".into()))?;
    Ok(PlanResult {
        sequence,
        ret,
        evaluated,
    })
}

/// Depth-first enumeration of every sequence in lexicographic order.
fn exhaustive<M: PlanningModel>(
    model: &M,
    s0: &M::State,
    grid: &ActionGrid,
    horizon: usize,
    gamma: f64,
) -> (Option<(f64, Vec<Setpoint>)>, usize) {
    struct Search<'a, M: PlanningModel> {
        model: &'a M,
        grid: &'a ActionGrid,
        horizon: usize,
        gamma: f64,
        prefix: Vec<Setpoint>,
        best: Option<(f64, Vec<Setpoint>)>,
        leaves: usize,
    }
    impl<M: PlanningModel> Search<'_, M> {
        fn go(&mut self, s: &M::State, acc: f64, disc: f64) {
            let k = self.prefix.len();
            if k == self.horizon {
                self.leaves += 1;
                if better(acc, &self.prefix, self.best.as_ref()) {
                    self.best = Some((acc, self.prefix.clone()));
                }
                return;
            }
            for i in 0..self.grid.len() {
                let a = self.grid.get(i);
                let Ok((n, r)) = self.model.step(k, s, &a) else {
                    continue;
                };
                self.prefix.push(a);
                self.go(&n, acc + disc * r, disc * self.gamma);
                self.prefix.pop();
            }
        }
    }
    let mut search = Search {
        model,
        grid,
        horizon,
        gamma,
        prefix: Vec::with_capacity(horizon),
        best: None,
        leaves: 0,
    };
    search.go(s0, 0.0, 1.0);
    (search.best, search.leaves)
}

/// Cross-entropy search: a per-step Gaussian over setpoints, sampled,
/// clipped to the grid box and snapped to grid values, refit to the elites.
fn cross_entropy<M: PlanningModel>(
    model: &M,
    s0: &M::State,
    grid: &ActionGrid,
    horizon: usize,
    gamma: f64,
    ce: &CrossEntropyConfig,
    extra: &[Setpoint],
) -> (Option<(f64, Vec<Setpoint>)>, usize) {
    let lo = grid.lo();
    let hi = grid.hi();
    let mut rng = ChaCha8Rng::seed_from_u64(ce.seed);
    let mut mean: Vec<Setpoint> = vec![
        match extra.first() {
            Some(e) => grid.snap(*e),
            None => grid.snap([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]),
        };
        horizon
    ];
    let mut std: Vec<Setpoint> = vec![[0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]), 0.5 * (hi[2] - lo[2])]; horizon];
    let elites = ce.elites.clamp(1, ce.population.max(1));
    let mut best: Option<(f64, Vec<Setpoint>)> = None;
    let mut evaluated = 0;

    for it in 0..ce.iterations {
        let mut scored: Vec<(f64, Vec<Setpoint>)> = Vec::with_capacity(ce.population + 1);
        if it > 0 {
            // The current mean, snapped, competes as one member.
            let m: Vec<Setpoint> = mean.iter().map(|p| grid.snap(*p)).collect();
            evaluated += 1;
            if let Some(r) = sequence_return(model, s0, &m, gamma) {
                scored.push((r, m));
            }
        }
        for _ in 0..ce.population {
            let seq: Vec<Setpoint> = (0..horizon)
                .map(|k| {
                    let mut p = [0.0; 3];
                    for d in 0..3 {
                        let x = if std[k][d] > 0.0 {
                            Normal::new(mean[k][d], std[k][d])
                                .map(|n| n.sample(&mut rng))
                                .unwrap_or(mean[k][d])
                        } else {
                            mean[k][d]
                        };
                        p[d] = x.clamp(lo[d], hi[d]);
                    }
                    grid.snap(p)
                })
                .collect();
            evaluated += 1;
            if let Some(r) = sequence_return(model, s0, &seq, gamma) {
                scored.push((r, seq));
            }
        }
        if scored.is_empty() {
            continue;
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| lex_cmp(x, y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        if better(scored[0].0, &scored[0].1, best.as_ref()) {
            best = Some(scored[0].clone());
        }
        let top = &scored[..elites.min(scored.len())];
        for k in 0..horizon {
            for d in 0..3 {
                let n = top.len() as f64;
                let m = top.iter().map(|(_, s)| s[k][d]).sum::<f64>() / n;
                let v = top.iter().map(|(_, s)| (s[k][d] - m).powi(2)).sum::<f64>() / n;
                mean[k][d] = m;
                std[k][d] = v.sqrt();
            }
        }
    }
    if ce.polish {
        if let Some(b) = best.as_mut() {
            evaluated += polish(model, s0, grid, gamma, b);
        }
    }
    (best, evaluated)
}

/// Rollout improvement of `best`: for each step `k` and each grid action
/// at `k`, the later steps are re-chosen greedily one at a time, and the
/// result replaces `best` if it scores higher. Sweeps repeat until none
/// improves. Costs `O(|grid|² · H²)` evaluations per sweep.
fn polish<M: PlanningModel>(
    model: &M,
    s0: &M::State,
    grid: &ActionGrid,
    gamma: f64,
    best: &mut (f64, Vec<Setpoint>),
) -> usize {
    let h = best.1.len();
    let mut evaluated = 0;
    let score = |seq: &[Setpoint], evaluated: &mut usize| {
        *evaluated += 1;
        sequence_return(model, s0, seq, gamma)
    };
    loop {
        let mut improved = false;
        for k in 0..h {
            for a in grid.iter() {
                if a == best.1[k] {
                    continue;
                }
                let mut seq = best.1.clone();
                seq[k] = a;
                let Some(mut r) = score(&seq, &mut evaluated) else {
                    continue;
                };
                for j in k + 1..h {
                    for b in grid.iter() {
                        let mut trial = seq.clone();
                        trial[j] = b;
                        if let Some(rt) = score(&trial, &mut evaluated) {
                            if better(rt, &trial, Some(&(r, seq.clone()))) {
                                r = rt;
                                seq = trial;
                            }
                        }
                    }
                }
                if better(r, &seq, Some(best)) {
                    *best = (r, seq);
                    improved = true;
                }
            }
        }
        if !improved {
            return evaluated;
        }
    }
}

/// Adapts any [`TwinModel`] to the planner: uniform setpoints across
/// `n_crah` units, exogenous inputs taken from `forecast[k]`.
pub struct TwinPlanning<'a> {
    pub model: &'a dyn TwinModel,
    pub forecast: &'a [ExogenousInput],
    pub spec: &'a MdpSpec,
    pub n_crah: usize,
}

impl PlanningModel for TwinPlanning<'_> {
    type State = PlantState;

    fn step(&self, k: usize, s: &PlantState, a: &Setpoint) -> Result<(PlantState, f64)> {
        let exo = self
            .forecast
            .get(k)
            .ok_or_else(|| Error::Config(format!("forecast has no step {k}")))?;
        let action = ControlAction::uniform(a[0], a[1], a[2], self.n_crah);
        let m = self.model.transition(s, &action, exo)?;
        let r = self.model.reward(self.spec, &m.next);
        if !r.is_finite() {
            return Err(Error::NonFinite { field: "reward" });
        }
        Ok((m.next, r))
    }
}

/// A small synthetic planning problem: three state bins, quadratic rewards
/// around a per-bin optimum, and transitions that depend on the fan
/// setpoint. Used to check the planner against brute-force enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMdp {
    pub grid: ActionGrid,
    pub offset: [f64; 3],
    pub weight: [[f64; 3]; 3],
    pub optimum: [[f64; 3]; 3],
    /// Normalized fan level above which bin `s` moves to `(s + 1) % 3`.
    pub fan_threshold: [f64; 3],
}

impl ToyMdp {
    pub fn random(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = ActionGrid::new(
            vec![6.0, 7.5, 9.0, 10.5, 12.0],
            vec![18.0, 20.0, 22.0, 24.0, 26.0],
            vec![0.3, 0.475, 0.65, 0.825, 1.0],
        )
        .expect("static grid");
        let mut m = Self {
            grid,
            offset: [0.0; 3],
            weight: [[0.0; 3]; 3],
            optimum: [[0.0; 3]; 3],
            fan_threshold: [0.0; 3],
        };
        for s in 0..3 {
            m.offset[s] = rng.random_range(-1.0..1.0);
            m.fan_threshold[s] = rng.random_range(0.1..0.9);
            for d in 0..3 {
                m.weight[s][d] = rng.random_range(0.5..2.0);
                m.optimum[s][d] = rng.random_range(0.0..1.0);
            }
        }
        m
    }

    pub fn unit(&self, a: &Setpoint) -> [f64; 3] {
        let (lo, hi) = (self.grid.lo(), self.grid.hi());
        [0, 1, 2].map(|d| (a[d] - lo[d]) / (hi[d] - lo[d]))
    }
}

impl PlanningModel for ToyMdp {
    type State = usize;

    fn step(&self, _: usize, s: &usize, a: &Setpoint) -> Result<(usize, f64)> {
        let u = self.unit(a);
        let mut r = self.offset[*s];
        for d in 0..3 {
            r -= self.weight[*s][d] * (u[d] - self.optimum[*s][d]).powi(2);
        }
        let next = if u[2] > self.fan_threshold[*s] { (s + 1) % 3 } else { *s };
        Ok((next, r))
    }
}

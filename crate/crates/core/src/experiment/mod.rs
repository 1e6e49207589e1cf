//! End-to-end experiments built on the loop: the strategy comparison,
//! calibration fidelity, pessimism coverage and drift assimilation.

mod calibration;
mod coverage;
mod drift;

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use calibration::{calibrate_on, calibration_experiment, perturb_hidden, CalibrationReport, FeatureMape};
pub use coverage::{coverage_experiment, CoverageConfig, CoverageReport};
pub use drift::{drift_experiment, DriftConfig, DriftReport};

use crate::agents::{baseline_policy, train_model_free, PolicyKind};
use crate::config::DlcfConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{
    warm_plant, CandidateConfig, LoopConfig, LoopSetup, Orchestrator, RunSummary, TelemetryRecord,
    TELEMETRY_SCHEMA_VERSION,
};
use crate::plant::{self, sense, ControlAction, ExoTrace, TraceConfig};
use crate::reservoir::{Conditions, RecordMeta, Reservoir};
use crate::safety::{ActionBounds, Scope, SlaEnvelope};
use crate::twin::{Dataset, Provenance, Transition, Twin};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which setpoints the loop may move and which policies it may draw on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Crah,
    CrahChw,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::Crah, Strategy::CrahChw];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Crah => "crah",
            Strategy::CrahChw => "crah_chw",
        }
    }

    pub fn scope(&self) -> Scope {
        match self {
            Strategy::Baseline | Strategy::Crah => Scope::CrahOnly,
            Strategy::CrahChw => Scope::CrahChw,
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (baseline, crah, crah_chw)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub scope: Scope,
    pub steps: usize,
    pub energy_kwh: f64,
    pub savings_pct: f64,
    pub compliance_pct: f64,
    pub violations: usize,
    pub fallbacks: usize,
    pub mean_fan_ratio: f64,
    pub mean_chws_c: f64,
    pub mean_sat_c: f64,
    pub crah_fans_kwh: f64,
    pub chw_pumps_kwh: f64,
    pub chillers_kwh: f64,
    pub cond_pumps_kwh: f64,
    pub tower_kwh: f64,
    pub mean_power_ape_pct: f64,
}

impl StrategyRow {
    fn new(strategy: Strategy, s: &RunSummary) -> Self {
        Self {
            strategy,
            scope: strategy.scope(),
            steps: s.steps,
            energy_kwh: s.total_energy_kwh,
            savings_pct: s.savings_pct.unwrap_or(0.0),
            compliance_pct: s.compliance_pct,
            violations: s.violations,
            fallbacks: s.fallbacks,
            mean_fan_ratio: s.mean_fan_ratio,
            mean_chws_c: s.mean_chws_c,
            mean_sat_c: s.mean_sat_c,
            crah_fans_kwh: s.breakdown.crah_fans_kwh,
            chw_pumps_kwh: s.breakdown.chw_pumps_kwh,
            chillers_kwh: s.breakdown.chillers_kwh,
            cond_pumps_kwh: s.breakdown.cond_pumps_kwh,
            tower_kwh: s.breakdown.tower_kwh,
            mean_power_ape_pct: s.mean_power_ape_pct,
        }
    }
}

/// Baseline vs CRAH vs CRAH&CHW over one trace and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub days: f64,
    pub seed: u64,
    pub rows: Vec<StrategyRow>,
}

impl ComparisonReport {
    pub fn row(&self, s: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(v)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loop settings for one run: the config's loop block with the run id,
/// scope, noise and seed filled in.
pub fn loop_config(cfg: &DlcfConfig, run_id: &str, scope: Scope) -> LoopConfig {
    LoopConfig {
        run_id: run_id.into(),
        scope,
        noise: cfg.noise,
        seed: cfg.seed,
        interval_s: cfg.plant.timestep,
        ..cfg.control_loop.clone()
    }
}

fn training_trace(cfg: &DlcfConfig) -> ExoTrace {
    let tc = TraceConfig {
        seed: cfg.trace.seed.wrapping_add(1),
        ..cfg.trace.clone()
    };
    ExoTrace::synthetic(&tc, cfg.plant.timestep, cfg.steps(cfg.days.max(1.0)))
}

/// Trains the model-free CRAH-only and CRAH&CHW agents on `twin` and stores
/// them, with the baseline, in a reservoir (persisted when `dir` is set).
pub fn train_reservoir(cfg: &DlcfConfig, twin: &Twin, dir: Option<&Path>) -> Result<Reservoir> {
    let mut res = match dir {
        Some(d) => Reservoir::open(d)?,
        None => Reservoir::in_memory(),
    };
    let trace = training_trace(cfg);
    let meta = |tags: &[&str]| RecordMeta {
        conditions: Conditions {
            tags: tags.iter().map(|t| t.to_string()).collect(),
            ..Conditions::default()
        },
        objectives: vec!["energy".into(), "sla".into()],
        ..RecordMeta::default()
    };
    if res.get("baseline").is_none() {
        res.register(baseline_policy(cfg.plant.n_crah), meta(&["rule"]))?;
    }
    for (id, scope) in [("mf_crah", Scope::CrahOnly), ("mf_crah_chw", Scope::CrahChw)] {
        if res.get(id).is_some() {
            continue;
        }
        let out = train_model_free(id, scope, twin, &cfg.plant, &trace, &cfg.mdp, &cfg.model_free)?;
        res.register(out.policy, meta(&["model_free", scope.as_str()]))?;
    }
    Ok(res)
}

/// The part of `full` a strategy may draw on.
pub fn reservoir_for(full: &Reservoir, strategy: Strategy) -> Result<Reservoir> {
    let mut out = Reservoir::in_memory();
    for rec in full.records() {
        let keep = match strategy {
            Strategy::Baseline => rec.kind == PolicyKind::Baseline,
            Strategy::Crah => rec.scope == Scope::CrahOnly,
            Strategy::CrahChw => true,
        };
        if !keep {
            continue;
        }
        let policy = full
            .policy(&rec.id)
            .ok_or_else(|| Error::UnknownId(rec.id.clone()))?
            .clone();
        out.register(
            policy,
            RecordMeta {
                conditions: rec.conditions.clone(),
                objectives: rec.objectives.clone(),
                perf: rec.perf,
            },
        )?;
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no policy in the reservoir suits `{}`", strategy.as_str())));
    }
    Ok(out)
}

/// One closed-loop run of `strategy` against a fresh plant, with a twin
/// built from `model`.
pub fn run_strategy(
    cfg: &DlcfConfig,
    model: &plant::PlantConfig,
    strategy: Strategy,
    trace: &ExoTrace,
    full: &Reservoir,
    runs_dir: Option<&Path>,
) -> Result<(RunSummary, Vec<TelemetryRecord>)> {
    let mut lc = loop_config(cfg, strategy.as_str(), strategy.scope());
    lc.runs_dir = runs_dir.map(Path::to_path_buf);
    if strategy == Strategy::Baseline {
        lc.candidates = CandidateConfig {
            top_k: 0,
            planner: None,
        };
    }
    let setup = LoopSetup {
        plant: warm_plant(cfg.plant.clone(), trace)?,
        twin: Twin::from_config(model.clone())?,
        reservoir: reservoir_for(full, strategy)?,
        trace: trace.clone(),
        spec: cfg.mdp.clone(),
    };
    let mut o = Orchestrator::new(lc, setup)?;
    let summary = o.run_loop(trace.len())?;
    Ok((summary, o.telemetry().to_vec()))
}

/// Runs every requested strategy over the same trace and seed, with a twin
/// equal to the plant and a freshly trained reservoir.
pub fn evaluate(cfg: &DlcfConfig, strategies: &[Strategy], runs_dir: Option<&Path>) -> Result<ComparisonReport> {
    evaluate_with(cfg, &cfg.plant, None, strategies, runs_dir)
}

/// [`evaluate`] with the twin built from `model` and, when given, policies
/// drawn from `reservoir` instead of trained on the spot. The baseline
/// always runs since savings are measured against it.
pub fn evaluate_with(
    cfg: &DlcfConfig,
    model: &plant::PlantConfig,
    reservoir: Option<&Reservoir>,
    strategies: &[Strategy],
    runs_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    model.validate()?;
    let trace = cfg.trace_for(cfg.days)?;
    if trace.is_empty() {
        return Ok(ComparisonReport {
            schema_version: REPORT_SCHEMA_VERSION,
            days: cfg.days,
            seed: cfg.seed,
            rows: Vec::new(),
        });
    }
    let trained;
    let full = match reservoir {
        Some(r) => r,
        None => {
            trained = train_reservoir(cfg, &Twin::from_config(model.clone())?, None)?;
            &trained
        }
    };
    let mut wanted: Vec<Strategy> = strategies.to_vec();
    wanted.sort();
    wanted.dedup();
    let (base, _) = run_strategy(cfg, model, Strategy::Baseline, &trace, full, runs_dir)?;
    let base_kwh = base.total_energy_kwh;
    let mut rows = Vec::new();
    for s in wanted {
        let summary = if s == Strategy::Baseline {
            base.clone()
        } else {
            run_strategy(cfg, model, s, &trace, full, runs_dir)?.0
        };
        let with_savings = RunSummary {
            savings_pct: Some((base_kwh - summary.total_energy_kwh) / base_kwh * 100.0),
            ..summary
        };
        rows.push(StrategyRow::new(s, &with_savings));
    }
    Ok(ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        days: cfg.days,
        seed: cfg.seed,
        rows,
    })
}

/// Open-loop operation for data collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    /// The rule-based baseline every step.
    Baseline,
    /// Uniformly random setpoints inside the joint bounds.
    Explore,
}

/// Drives the plant open loop and records telemetry in the loop's format.
pub fn simulate(cfg: &DlcfConfig, plant_cfg: &plant::PlantConfig, days: f64, mode: SimulateMode) -> Result<Vec<TelemetryRecord>> {
    let trace = cfg.trace_for(days)?;
    if trace.is_empty() {
        return Ok(Vec::new());
    }
    let mut p = warm_plant(plant_cfg.clone(), &trace)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = plant_cfg.n_crah;
    let bounds = ActionBounds::for_scope(Scope::CrahChw, n);
    let sla = SlaEnvelope::default();
    let dt = plant_cfg.timestep;
    let mut out = Vec::with_capacity(trace.len());
    for (k, exo) in trace.samples.iter().enumerate() {
        let a = match mode {
            SimulateMode::Baseline => ControlAction::uniform(7.0, 22.0, 0.85, n),
            SimulateMode::Explore => {
                let (c, s, f) = (bounds.chws(), bounds.sat(), bounds.fan());
                ControlAction::uniform(
                    rng.random_range(c.lo..=c.hi),
                    rng.random_range(s.lo..=s.hi),
                    rng.random_range(f.lo..=f.hi),
                    n,
                )
            }
        };
        let truth = p.advance(&a, exo)?.clone();
        let z = sense(&truth, &cfg.noise, rng.random()).values;
        out.push(TelemetryRecord {
            schema_version: TELEMETRY_SCHEMA_VERSION,
            step: k,
            sim_time: truth.sim_time,
            exo: *exo,
            reading: z,
            plant: truth.clone(),
            action: a,
            selected_id: "open_loop".into(),
            deployed_source: "open_loop".into(),
            fallback: false,
            verification_id: None,
            reward: cfg.mdp.reward(&truth),
            energy_kwh: truth.total_power() * dt / 3600.0,
            sla_ok: sla.is_compliant(&truth),
            inlet_c: truth.cold_aisle_temp,
            rh_pct: truth.inlet_rh(),
            prediction_error: [0.0; plant::STATE_DIM],
            power_ape_pct: 0.0,
            params_version: 0,
        });
    }
    Ok(out)
}

/// Sensed transitions between consecutive telemetry records.
pub fn dataset_from_telemetry(records: &[TelemetryRecord], spec: &crate::mdp::MdpSpec) -> Result<Dataset> {
    let transitions = records
        .windows(2)
        .map(|w| Transition {
            t: w[0].sim_time,
            s: w[0].reading.clone(),
            a: w[1].action.clone(),
            r: spec.reward(&w[1].reading),
            s_next: w[1].reading.clone(),
            exo: w[1].exo,
        })
        .collect();
    Dataset::new(Provenance::Telemetry, transitions)
}

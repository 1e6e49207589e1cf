use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loop_config;
use crate::agents::baseline_policy;
use crate::config::DlcfConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{warm_plant, DriftEvent, LoopSetup, Orchestrator, RecalibrationEvent, TelemetryRecord};
use crate::reservoir::{RecordMeta, Reservoir};
use crate::safety::Scope;
use crate::twin::{ParamName, Twin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub days: f64,
    /// Day on which the chiller COP steps.
    pub drift_day: f64,
    pub factor: f64,
    /// Rolling power MAPE that triggers a refit in the assimilating run.
    pub threshold_pct: f64,
    pub scope: Scope,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            days: 7.0,
            drift_day: 3.0,
            factor: 1.1,
            threshold_pct: 2.5,
            scope: Scope::CrahOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub schema_version: u32,
    pub drift_step: usize,
    pub steps: usize,
    /// Mean one-step total-power APE from the drift step on.
    pub assimilating_mape_pct: f64,
    pub frozen_mape_pct: f64,
    pub recalibrations: Vec<RecalibrationEvent>,
    /// Step of the first applied refit after the drift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_swap_step: Option<usize>,
    /// Rolling MAPE that triggered that refit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_swap_mape_pct: Option<f64>,
    /// Mean APE over the day following it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_swap_mape_pct: Option<f64>,
}

impl DriftReport {
    pub fn ratio(&self) -> f64 {
        self.assimilating_mape_pct / self.frozen_mape_pct
    }
}

fn mean_ape(t: &[TelemetryRecord]) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.iter().map(|r| r.power_ape_pct).sum::<f64>() / t.len() as f64
}

/// Runs the loop twice over the same trace and seeds with a COP step at
/// `drift_day`: once with recalibration and once with frozen parameters.
pub fn drift_experiment(cfg: &DlcfConfig, dc: &DriftConfig, runs_dir: Option<&Path>) -> Result<DriftReport> {
    let trace = cfg.trace_for(dc.days)?;
    let drift_step = cfg.steps(dc.drift_day);
    if drift_step >= trace.len() {
        return Err(Error::Config("drift day lies past the end of the run".into()));
    }
    let run = |id: &str, recalibrate: bool| -> Result<Orchestrator> {
        let mut lc = loop_config(cfg, id, dc.scope);
        lc.runs_dir = runs_dir.map(Path::to_path_buf);
        lc.drift = vec![DriftEvent {
            at_step: drift_step,
            param: ParamName::ChillerCopRef,
            factor: dc.factor,
        }];
        lc.recalibration.enabled = recalibrate;
        lc.recalibration.threshold_pct = dc.threshold_pct;
        let mut reservoir = Reservoir::in_memory();
        reservoir.register(baseline_policy(cfg.plant.n_crah), RecordMeta::default())?;
        let setup = LoopSetup {
            plant: warm_plant(cfg.plant.clone(), &trace)?,
            twin: Twin::from_config(cfg.plant.clone())?,
            reservoir,
            trace: trace.clone(),
            spec: cfg.mdp.clone(),
        };
        let mut o = Orchestrator::new(lc, setup)?;
        o.run_loop(trace.len())?;
        Ok(o)
    };
    let assim = run("drift_assimilating", true)?;
    let frozen = run("drift_frozen", false)?;
    let after = |o: &Orchestrator| mean_ape(&o.telemetry()[drift_step..]);
    let swap = assim
        .recalibrations()
        .iter()
        .find(|e| e.applied && e.step > drift_step)
        .cloned();
    let day = cfg.steps(1.0);
    let post = swap.as_ref().map(|e| {
        let end = (e.step + day).min(assim.telemetry().len());
        mean_ape(&assim.telemetry()[e.step..end])
    });
    Ok(DriftReport {
        schema_version: super::REPORT_SCHEMA_VERSION,
        drift_step,
        steps: trace.len(),
        assimilating_mape_pct: after(&assim),
        frozen_mape_pct: after(&frozen),
        recalibrations: assim.recalibrations().to_vec(),
        first_swap_step: swap.as_ref().map(|e| e.step),
        pre_swap_mape_pct: swap.as_ref().map(|e| e.trigger_mape_pct),
        post_swap_mape_pct: post,
    })
}

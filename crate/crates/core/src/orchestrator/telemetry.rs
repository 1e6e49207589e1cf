use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::verify::VerificationRequest;
use crate::error::{Error, Result};
use crate::plant::{ControlAction, ExogenousInput, PlantState, STATE_DIM};
use crate::safety::{EvaluationReport, SlaEnvelope};

pub const TELEMETRY_SCHEMA_VERSION: u32 = 1;

/// One control step as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub schema_version: u32,
    pub step: usize,
    pub sim_time: f64,
    pub exo: ExogenousInput,
    /// Sensed plant state at the end of the step.
    pub reading: PlantState,
    /// Ground-truth state at the end of the step (simulation only).
    pub plant: PlantState,
    pub action: ControlAction,
    /// Candidate whose action was selected by pre-evaluation.
    pub selected_id: String,
    /// Where the deployed action came from: the selected candidate, the
    /// expert, or the fallback.
    pub deployed_source: String,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification_id: Option<u64>,
    pub reward: f64,
    pub energy_kwh: f64,
    pub sla_ok: bool,
    pub inlet_c: f64,
    pub rh_pct: f64,
    /// Twin one-step prediction minus reading, per state field.
    pub prediction_error: [f64; STATE_DIM],
    /// Absolute percentage error of the predicted total power.
    pub power_ape_pct: f64,
    pub params_version: u64,
}

impl TelemetryRecord {
    /// Recomputes the SLA flag from the recorded plant state.
    pub fn replay_sla(&self, sla: &SlaEnvelope) -> bool {
        sla.is_compliant(&self.plant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationEvent {
    pub step: usize,
    pub sim_time: f64,
    /// Rolling power MAPE that triggered the attempt.
    pub trigger_mape_pct: f64,
    /// Power MAPE over the same window with the new parameters.
    pub window_mape_after_pct: f64,
    pub applied: bool,
    pub params_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Energy per plant component over a run, kWh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub crah_fans_kwh: f64,
    pub chw_pumps_kwh: f64,
    pub chillers_kwh: f64,
    pub cond_pumps_kwh: f64,
    pub tower_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub steps: usize,
    pub total_energy_kwh: f64,
    pub breakdown: EnergyBreakdown,
    pub compliance_pct: f64,
    pub violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub savings_pct: Option<f64>,
    pub fallbacks: usize,
    pub mean_fan_ratio: f64,
    pub mean_chws_c: f64,
    pub mean_sat_c: f64,
    pub mean_power_ape_pct: f64,
    pub recalibrations: Vec<RecalibrationEvent>,
}

impl RunSummary {
    /// Aggregates telemetry. `baseline_kwh` adds the savings figure
    /// `(E_baseline - E) / E_baseline * 100`.
    pub fn from_telemetry(
        run_id: &str,
        records: &[TelemetryRecord],
        recalibrations: &[RecalibrationEvent],
        dt: f64,
        baseline_kwh: Option<f64>,
    ) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&TelemetryRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let kwh = |f: &dyn Fn(&PlantState) -> f64| records.iter().map(|r| f(&r.plant)).sum::<f64>() * dt / 3600.0;
        let breakdown = EnergyBreakdown {
            crah_fans_kwh: kwh(&|s| s.power.crah_fans),
            chw_pumps_kwh: kwh(&|s| s.power.chw_pumps),
            chillers_kwh: kwh(&|s| s.power.chillers),
            cond_pumps_kwh: kwh(&|s| s.power.cond_pumps),
            tower_kwh: kwh(&|s| s.power.tower),
        };
        let total: f64 = records.iter().map(|r| r.energy_kwh).sum();
        let violations = records.iter().filter(|r| !r.sla_ok).count();
        Self {
            schema_version: TELEMETRY_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            steps: n,
            total_energy_kwh: total,
            breakdown,
            compliance_pct: if n == 0 {
                100.0
            } else {
                100.0 * (n - violations) as f64 / n as f64
            },
            violations,
            savings_pct: baseline_kwh
                .filter(|b| *b > 0.0)
                .map(|b| (b - total) / b * 100.0),
            fallbacks: records.iter().filter(|r| r.fallback).count(),
            mean_fan_ratio: mean(&|r| r.action.mean_fan()),
            mean_chws_c: mean(&|r| r.action.chw_supply_setpoint),
            mean_sat_c: mean(&|r| r.action.mean_sat()),
            mean_power_ape_pct: mean(&|r| r.power_ape_pct),
            recalibrations: recalibrations.to_vec(),
        }
    }
}

/// Status updates published by the control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum LoopEvent {
    StateUpdate(StateSnapshot),
    Evaluation(EvaluationEvent),
    VerificationPending(VerificationRequest),
    VerificationResolved(VerificationRequest),
    Recalibration(RecalibrationEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub step: usize,
    pub sim_time: f64,
    pub plant: PlantSnapshot,
    pub action: ControlAction,
    pub twin_mape_rolling: f64,
    pub params_version: u64,
}

/// Sensed quantities with units in the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSnapshot {
    pub cold_aisle_temp_c: f64,
    pub return_air_temp_c: f64,
    pub inlet_rh_pct: f64,
    pub chw_supply_temp_c: f64,
    pub chw_return_temp_c: f64,
    pub cond_water_temp_c: f64,
    pub it_load_kw: f64,
    pub total_power_kw: f64,
    pub crah_fans_kw: f64,
    pub chw_pumps_kw: f64,
    pub chillers_kw: f64,
    pub cond_pumps_kw: f64,
    pub tower_kw: f64,
}

impl PlantSnapshot {
    pub fn new(s: &PlantState, exo: &ExogenousInput) -> Self {
        Self {
            cold_aisle_temp_c: s.cold_aisle_temp,
            return_air_temp_c: s.return_air_temp,
            inlet_rh_pct: s.inlet_rh(),
            chw_supply_temp_c: s.chw_supply_temp,
            chw_return_temp_c: s.chw_return_temp,
            cond_water_temp_c: s.cond_water_temp,
            it_load_kw: exo.it_load,
            total_power_kw: s.total_power(),
            crah_fans_kw: s.power.crah_fans,
            chw_pumps_kw: s.power.chw_pumps,
            chillers_kw: s.power.chillers,
            cond_pumps_kw: s.power.cond_pumps,
            tower_kw: s.power.tower,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationEvent {
    pub step: usize,
    pub sim_time: f64,
    pub selected_id: String,
    pub fallback: bool,
    pub reports: Vec<EvaluationReport>,
}

/// Receives loop events. Must not block the loop for long.
pub trait EventSink: Send + Sync {
    fn emit(&self, event: &LoopEvent);
}

/// One audit-log line per verification decision or expiry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub request_id: u64,
    pub step: usize,
    pub sim_time: f64,
    pub status: String,
    pub actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ControlAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    /// Set when a decision was rejected and the request stayed pending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

/// Append-only files under `runs/<run_id>/`.
pub struct RunWriter {
    dir: PathBuf,
    telemetry: BufWriter<File>,
    audit: BufWriter<File>,
}

impl RunWriter {
    pub fn create(root: impl AsRef<Path>, run_id: &str) -> Result<Self> {
        let dir = root.as_ref().join(run_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            telemetry: open("telemetry.jsonl")?,
            audit: open("audit.jsonl")?,
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn telemetry(&mut self, r: &TelemetryRecord) -> Result<()> {
        let p = self.dir.join("telemetry.jsonl");
        Self::line(&mut self.telemetry, &p, r)
    }

    pub fn audit(&mut self, e: &AuditEntry) -> Result<()> {
        let p = self.dir.join("audit.jsonl");
        Self::line(&mut self.audit, &p, e)
    }

    pub fn summary(&self, s: &RunSummary) -> Result<()> {
        let p = self.dir.join("summary.json");
        let json = serde_json::to_string_pretty(s)?;
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }
}

pub fn read_telemetry(path: impl AsRef<Path>) -> Result<Vec<TelemetryRecord>> {
    read_jsonl(path)
}

pub fn read_audit(path: impl AsRef<Path>) -> Result<Vec<AuditEntry>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

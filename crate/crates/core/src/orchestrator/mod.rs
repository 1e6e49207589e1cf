//! The live control loop: sense, assimilate, generate candidates,
//! pre-evaluate, pass the expert gate, deploy, log.
//!
//! The loop advances simulated time against a ground-truth [`Plant`] and is
//! the single writer of plant, twin and reservoir state. Everything it does
//! is published as [`LoopEvent`]s and appended to telemetry.

mod recalibrate;
mod telemetry;
mod verify;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use recalibrate::{maybe_recalibrate, replay_power_mape, RecalibrationConfig, Refit, TelemetryWindow};
pub use telemetry::{
    read_audit, read_telemetry, AuditEntry, EnergyBreakdown, EvaluationEvent, EventSink, LoopEvent,
    PlantSnapshot, RecalibrationEvent, RunSummary, RunWriter, StateSnapshot, TelemetryRecord,
    TELEMETRY_SCHEMA_VERSION,
};
pub use verify::{
    ChannelDecisions, Decision, DecisionError, DecisionHandle, DecisionKind, DecisionMsg, DecisionReply,
    DecisionSource, NoExpert, Scripted, VerificationRequest, VerificationStatus, VERIFICATION_SCHEMA_VERSION,
};

use crate::agents::{baseline_policy, planner_policy, ActContext, Policy, SearchMode, BASELINE_SETPOINT};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{self, sense, ControlAction, ExoTrace, ExogenousInput, NoiseConfig, Plant, PlantState, SensorReading, STATE_DIM};
use crate::reservoir::{Query, Reservoir};
use crate::safety::{pre_evaluate, ActionBounds, Candidate, PreEvalConfig, Scope, Selection, SlaEnvelope};
use crate::twin::{assimilate, ParamName, StateEstimate, Transition, Twin};

/// Expert verification gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateConfig {
    Off,
    /// Requests not decided within `timeout_s` simulated seconds expire and
    /// the fallback is deployed.
    On { timeout_s: f64 },
}

impl GateConfig {
    pub const DEFAULT_TIMEOUT_S: f64 = 300.0;
}

/// Multiplies a ground-truth plant parameter by `factor` from `at_step` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub at_step: usize,
    pub param: ParamName,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    /// Reservoir policies taken per step, best historical return first.
    pub top_k: usize,
    /// Search used for the fresh planner candidate; `None` disables it.
    pub planner: Option<SearchMode>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            planner: Some(SearchMode::Hold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub run_id: String,
    /// Control interval, s. Must match the plant timestep.
    pub interval_s: f64,
    pub horizon: usize,
    /// Setpoints the loop may move.
    pub scope: Scope,
    pub gate: GateConfig,
    pub recalibration: RecalibrationConfig,
    pub candidates: CandidateConfig,
    pub drift: Vec<DriftEvent>,
    pub noise: NoiseConfig,
    /// Process variance of the state filter as a multiple of the sensor
    /// variance.
    pub process_noise_scale: f64,
    /// Filter candidates on any ensemble member's violation.
    pub strict: bool,
    pub seed: u64,
    /// Wall-clock sleep after each step, for demos; 0 runs flat out.
    pub pacing_ms: u64,
    /// Directory holding `<run_id>/` artifacts; `None` keeps everything in
    /// memory.
    pub runs_dir: Option<PathBuf>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            interval_s: 900.0,
            horizon: 3,
            scope: Scope::CrahChw,
            gate: GateConfig::Off,
            recalibration: RecalibrationConfig::default(),
            candidates: CandidateConfig::default(),
            drift: Vec::new(),
            noise: NoiseConfig::default(),
            process_noise_scale: 1.0,
            strict: false,
            seed: 7,
            pacing_ms: 0,
            runs_dir: None,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval_s > 0.0) {
            return Err(Error::Config("interval_s must be > 0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if let GateConfig::On { timeout_s } = self.gate {
            if !(timeout_s > 0.0) {
                return Err(Error::Config("gate timeout must be > 0".into()));
            }
        }
        if !(self.process_noise_scale >= 0.0) {
            return Err(Error::Config("process_noise_scale must be >= 0".into()));
        }
        if let Some(d) = self.drift.iter().find(|d| !(d.factor > 0.0)) {
            return Err(Error::Config(format!("drift factor {} must be > 0", d.factor)));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id `{}` is not a plain name", self.run_id)));
        }
        self.recalibration.validate()
    }
}

/// Everything the loop runs against.
pub struct LoopSetup {
    pub plant: Plant,
    pub twin: Twin,
    pub reservoir: Reservoir,
    pub trace: ExoTrace,
    /// Reward definition; its horizon and timestep are overridden by the
    /// loop config.
    pub spec: MdpSpec,
}

/// A plant warmed up under the baseline at the trace's first disturbance.
pub fn warm_plant(cfg: plant::PlantConfig, trace: &ExoTrace) -> Result<Plant> {
    let exo = trace
        .samples
        .first()
        .copied()
        .ok_or_else(|| Error::Config("trace is empty".into()))?;
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    let s = plant::settle(PlantState::at_rest(24.0, 0.008), &a, &exo, &cfg, 40)?;
    Plant::new(cfg, s)
}

pub struct Orchestrator {
    cfg: LoopConfig,
    spec: MdpSpec,
    plant: Plant,
    twin: Twin,
    reservoir: Reservoir,
    trace: ExoTrace,
    baseline: Policy,
    planner: Option<Policy>,
    bounds: ActionBounds,
    sla: SlaEnvelope,
    estimate: StateEstimate,
    last_reading: PlantState,
    window: TelemetryWindow,
    step: usize,
    telemetry: Vec<TelemetryRecord>,
    recalibrations: Vec<RecalibrationEvent>,
    requests: Vec<VerificationRequest>,
    next_request: u64,
    decisions: Box<dyn DecisionSource>,
    sink: Option<Arc<dyn EventSink>>,
    writer: Option<RunWriter>,
}

fn step_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl Orchestrator {
    pub fn new(cfg: LoopConfig, setup: LoopSetup) -> Result<Self> {
        cfg.validate()?;
        let LoopSetup {
            plant,
            twin,
            reservoir,
            trace,
            spec,
        } = setup;
        if (plant.cfg.timestep - cfg.interval_s).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "interval_s {} differs from the plant timestep {}",
                cfg.interval_s, plant.cfg.timestep
            )));
        }
        if reservoir.is_empty() {
            return Err(Error::Config("the reservoir is empty".into()));
        }
        if trace.is_empty() {
            return Err(Error::Config("trace is empty".into()));
        }
        let spec = MdpSpec {
            horizon: cfg.horizon,
            timestep: cfg.interval_s,
            ..spec
        };
        spec.validate()?;
        let n = plant.cfg.n_crah;
        let reading = sense(&plant.state, &cfg.noise, step_seed(cfg.seed, u64::MAX));
        let estimate = StateEstimate::new(&reading.values, cfg.noise.variances(&reading.values))?;
        let planner = cfg
            .candidates
            .planner
            .clone()
            .map(|search| planner_policy("planner", cfg.scope, n, search));
        let writer = match &cfg.runs_dir {
            Some(root) => Some(RunWriter::create(root, &cfg.run_id)?),
            None => None,
        };
        Ok(Self {
            bounds: ActionBounds::for_scope(cfg.scope, n),
            window: TelemetryWindow::new(cfg.recalibration.window),
            baseline: baseline_policy(n),
            planner,
            sla: SlaEnvelope::default(),
            estimate,
            last_reading: reading.values,
            step: 0,
            telemetry: Vec::new(),
            recalibrations: Vec::new(),
            requests: Vec::new(),
            next_request: 1,
            decisions: Box::new(NoExpert),
            sink: None,
            writer,
            cfg,
            spec,
            plant,
            twin,
            reservoir,
            trace,
        })
    }

    pub fn with_decisions(mut self, src: Box<dyn DecisionSource>) -> Self {
        self.decisions = src;
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn twin(&self) -> &Twin {
        &self.twin
    }

    pub fn reservoir(&self) -> &Reservoir {
        &self.reservoir
    }

    pub fn telemetry(&self) -> &[TelemetryRecord] {
        &self.telemetry
    }

    pub fn requests(&self) -> &[VerificationRequest] {
        &self.requests
    }

    pub fn recalibrations(&self) -> &[RecalibrationEvent] {
        &self.recalibrations
    }

    pub fn estimate(&self) -> &StateEstimate {
        &self.estimate
    }

    pub fn rolling_mape(&self) -> f64 {
        self.window.mape()
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.writer.as_ref().map(|w| w.dir().to_path_buf())
    }

    fn emit(&self, ev: LoopEvent) {
        if let Some(s) = &self.sink {
            s.emit(&ev);
        }
    }

    fn apply_drift(&mut self, k: usize) {
        for d in self.cfg.drift.iter().filter(|d| d.at_step == k) {
            let v = d.param.read(&self.plant.cfg);
            d.param.write(&mut self.plant.cfg, v * d.factor);
            log::info!("step {k}: drift {:?} x{}", d.param, d.factor);
        }
    }

    /// Refits the twin between steps when the rolling power error is high.
    fn recalibrate_if_needed(&mut self) -> Result<()> {
        let before = self.window.mape();
        let Some(refit) = maybe_recalibrate(&self.window, &self.twin, &self.cfg.recalibration)? else {
            return Ok(());
        };
        let applied = refit.params.is_some();
        if let Some(p) = refit.params {
            self.twin.set_params(p)?;
        }
        self.window.clear();
        let ev = RecalibrationEvent {
            step: self.step,
            sim_time: self.plant.state.sim_time,
            trigger_mape_pct: before,
            window_mape_after_pct: refit.window_mape_after_pct,
            applied,
            params_version: self.twin.params_version(),
            reason: refit.reason,
        };
        self.recalibrations.push(ev.clone());
        self.emit(LoopEvent::Recalibration(ev));
        Ok(())
    }

    fn allowed(&self, scope: Scope) -> bool {
        scope == Scope::CrahOnly || self.cfg.scope == Scope::CrahChw
    }

    /// Top reservoir policies for the current load band, the planner's fresh
    /// action and the baseline.
    fn candidates(&self, s: &PlantState, forecast: &[ExogenousInput]) -> Vec<(String, ControlAction)> {
        let ctx = ActContext {
            model: Some(&self.twin),
            forecast,
            spec: &self.spec,
        };
        let q = Query {
            load_kw: Some(forecast[0].it_load),
            ..Query::default()
        };
        let mut out: Vec<(String, ControlAction)> = Vec::new();
        let picked = self
            .reservoir
            .query(&q)
            .into_iter()
            .filter(|r| self.allowed(r.scope) && r.id != "baseline" && r.id != "planner")
            .take(self.cfg.candidates.top_k);
        for rec in picked {
            let Some(policy) = self.reservoir.policy(&rec.id) else {
                continue;
            };
            match policy.act(s, &ctx) {
                Ok(a) => out.push((rec.id.clone(), a)),
                Err(e) => log::warn!("policy {} failed to act: {e}", rec.id),
            }
        }
        if let Some(p) = &self.planner {
            match p.act(s, &ctx) {
                Ok(a) => out.push((p.id.clone(), a)),
                Err(e) => log::warn!("planner failed: {e}"),
            }
        }
        if let Ok(a) = self.baseline.act(s, &ctx) {
            out.push((self.baseline.id.clone(), a));
        }
        out
    }

    fn preeval_cfg(&self) -> PreEvalConfig {
        PreEvalConfig {
            horizon: self.cfg.horizon,
            envelope: self.sla,
            strict: self.cfg.strict,
        }
    }

    fn audit(&mut self, req: &VerificationRequest, rejected: Option<String>) -> Result<()> {
        let entry = AuditEntry {
            request_id: req.id,
            step: req.step,
            sim_time: req.sim_time,
            status: req.status.as_str().into(),
            actor: req.actor.clone().unwrap_or_else(|| "operator".into()),
            action: match &req.status {
                VerificationStatus::Modified { action } => Some(action.clone()),
                VerificationStatus::Approved => Some(req.selected_action.clone()),
                _ => None,
            },
            notes: req.notes.clone(),
            rejected,
        };
        if let Some(w) = &mut self.writer {
            w.audit(&entry)?;
        }
        Ok(())
    }

    /// Passes `sel` through the expert gate. Returns the action to deploy,
    /// its source, the request id and whether the fallback was used.
    fn gate(
        &mut self,
        sel: &Selection,
        s: &PlantState,
        forecast: &[ExogenousInput],
        baseline: &ControlAction,
    ) -> Result<(ControlAction, String, Option<u64>, bool)> {
        let GateConfig::On { timeout_s } = self.cfg.gate else {
            return Ok((sel.action.clone(), sel.selected_id.clone(), None, sel.fallback));
        };
        let id = self.next_request;
        self.next_request += 1;
        let mut req = VerificationRequest::new(id, self.step, self.plant.state.sim_time, sel);
        self.emit(LoopEvent::VerificationPending(req.clone()));
        let pcfg = self.preeval_cfg();
        loop {
            let Some(d) = self.decisions.next_decision(&req, timeout_s) else {
                req.expire().map_err(|e| Error::InvalidTransition(e.to_string()))?;
                self.audit(&req, None)?;
                break;
            };
            let (twin, spec, bounds) = (&self.twin, &self.spec, &self.bounds);
            let check = |a: &ControlAction| {
                pre_evaluate(
                    twin,
                    &[Candidate::action("expert", a)],
                    &Candidate::action("baseline", baseline),
                    s,
                    forecast,
                    spec,
                    bounds,
                    &pcfg,
                )
            };
            let res = req.resolve(&d, bounds, &check);
            self.decisions.outcome(&req, &res);
            match res {
                Ok(()) => {
                    self.audit(&req, None)?;
                    break;
                }
                Err(e) => {
                    let mut tmp = req.clone();
                    tmp.actor = Some(d.actor.clone());
                    tmp.notes = d.notes.clone();
                    self.audit(&tmp, Some(e.to_string()))?;
                }
            }
        }
        self.emit(LoopEvent::VerificationResolved(req.clone()));
        let out = match &req.status {
            VerificationStatus::Approved => (sel.action.clone(), sel.selected_id.clone(), Some(id), sel.fallback),
            VerificationStatus::Modified { action } => (action.clone(), "expert".into(), Some(id), false),
            _ => (baseline.clone(), self.baseline.id.clone(), Some(id), true),
        };
        self.requests.push(req);
        Ok(out)
    }

    /// One pass of the loop against the plant.
    pub fn run_step(&mut self) -> Result<TelemetryRecord> {
        let k = self.step;
        let dt = self.cfg.interval_s;
        self.apply_drift(k);
        self.recalibrate_if_needed()?;
        let params_version = self.twin.params_version();

        let exo = self.trace.at(k);
        let forecast = self.trace.window(k, self.cfg.horizon);
        let s_est = self.estimate.state();
        let cands = self.candidates(&s_est, &forecast);
        let [chws, sat, fan] = BASELINE_SETPOINT;
        let baseline = self
            .bounds
            .project(&ControlAction::uniform(chws, sat, fan, self.plant.cfg.n_crah))?;
        let candidates: Vec<Candidate> = cands.iter().map(|(id, a)| Candidate::action(id, a)).collect();
        let sel = pre_evaluate(
            &self.twin,
            &candidates,
            &Candidate::action(&self.baseline.id, &baseline),
            &s_est,
            &forecast,
            &self.spec,
            &self.bounds,
            &self.preeval_cfg(),
        )?;
        self.emit(LoopEvent::Evaluation(EvaluationEvent {
            step: k,
            sim_time: self.plant.state.sim_time,
            selected_id: sel.selected_id.clone(),
            fallback: sel.fallback,
            reports: sel.reports.clone(),
        }));

        let (action, source, verification_id, fallback) = self.gate(&sel, &s_est, &forecast, &baseline)?;
        let action = self.bounds.project(&action)?;

        let predicted = self.twin.predict(&s_est, &action, &exo)?.mean;
        let truth = self
            .plant
            .advance(&action, &exo)
            .map_err(|e| Error::Config(format!("plant step {k} failed: {e}")))?
            .clone();
        let reading: SensorReading = sense(&truth, &self.cfg.noise, step_seed(self.cfg.seed, k as u64));
        let z = reading.values.clone();

        let pv = predicted.to_vec();
        let zv = z.to_vec();
        let mut prediction_error = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            prediction_error[i] = pv[i] - zv[i];
        }
        let obs = z.total_power();
        let power_ape_pct = if obs > 0.0 {
            (predicted.total_power() - obs).abs() / obs * 100.0
        } else {
            0.0
        };

        let reward = self.spec.reward(&truth);
        self.window.push(
            Transition {
                t: k as f64 * dt,
                s: self.last_reading.clone(),
                a: action.clone(),
                r: self.spec.reward(&z),
                s_next: z.clone(),
                exo,
            },
            power_ape_pct,
        );

        let meas_var = self.cfg.noise.variances(&z);
        let process_var = meas_var.map(|v| v * self.cfg.process_noise_scale);
        let prior = StateEstimate {
            mean: pv,
            variance: self.estimate.variance,
            sim_time: truth.sim_time,
        };
        self.estimate = assimilate(&prior, &reading, &process_var, &meas_var)?;
        self.last_reading = z.clone();

        let sla_ok = self.sla.is_compliant(&truth);
        if self.reservoir.get(&source).is_some() {
            self.reservoir
                .record_performance(&source, reward, if sla_ok { 100.0 } else { 0.0 })?;
        }

        let rec = TelemetryRecord {
            schema_version: TELEMETRY_SCHEMA_VERSION,
            step: k,
            sim_time: truth.sim_time,
            exo,
            reading: z.clone(),
            plant: truth.clone(),
            action: action.clone(),
            selected_id: sel.selected_id.clone(),
            deployed_source: source,
            fallback,
            verification_id,
            reward,
            energy_kwh: truth.total_power() * dt / 3600.0,
            sla_ok,
            inlet_c: truth.cold_aisle_temp,
            rh_pct: truth.inlet_rh(),
            prediction_error,
            power_ape_pct,
            params_version,
        };
        if let Some(w) = &mut self.writer {
            w.telemetry(&rec)?;
        }
        self.telemetry.push(rec.clone());
        self.emit(LoopEvent::StateUpdate(StateSnapshot {
            step: k,
            sim_time: truth.sim_time,
            plant: PlantSnapshot::new(&z, &exo),
            action,
            twin_mape_rolling: self.window.mape(),
            params_version,
        }));
        self.step += 1;
        if self.cfg.pacing_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.cfg.pacing_ms));
        }
        Ok(rec)
    }

    /// Summary of everything run so far.
    pub fn summary(&self, baseline_kwh: Option<f64>) -> RunSummary {
        RunSummary::from_telemetry(
            &self.cfg.run_id,
            &self.telemetry,
            &self.recalibrations,
            self.cfg.interval_s,
            baseline_kwh,
        )
    }

    /// Runs `n_steps` steps and writes the summary. A failed step stops the
    /// loop; the error is also written to `diagnostic.txt` in the run
    /// directory.
    pub fn run_loop(&mut self, n_steps: usize) -> Result<RunSummary> {
        for _ in 0..n_steps {
            if let Err(e) = self.run_step() {
                if let Some(w) = &self.writer {
                    let p = w.dir().join("diagnostic.txt");
                    let _ = std::fs::write(&p, format!("step {}: {e}\n", self.step));
                }
                return Err(e);
            }
        }
        let s = self.summary(None);
        if let Some(w) = &self.writer {
            w.summary(&s)?;
        }
        Ok(s)
    }
}

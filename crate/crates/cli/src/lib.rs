//! The `dlcf` command line. Exit codes: 0 ok, 1 runtime failure, 2 usage.

pub mod report;

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlcf_core::config::{DlcfConfig, CONFIG_SCHEMA_VERSION};
use dlcf_core::experiment::{
    calibrate_on, coverage_experiment, dataset_from_telemetry, drift_experiment, evaluate_with, loop_config,
    perturb_hidden, simulate, train_reservoir, CalibrationReport, CoverageConfig, DriftConfig, SimulateMode,
    Strategy, REPORT_SCHEMA_VERSION,
};
use dlcf_core::orchestrator::{
    read_telemetry, warm_plant, ChannelDecisions, GateConfig, LoopSetup, Orchestrator, TELEMETRY_SCHEMA_VERSION,
};
use dlcf_core::plant::PlantConfig;
use dlcf_core::reservoir::Reservoir;
use dlcf_core::twin::{Twin, TwinParams};
use dlcf_gateway::{spawn_loop, AppState, GatewayConfig, Hub};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const TWIN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dlcf", version, about = "Digital-twin control of data-center cooling")]
pub struct Cli {
    /// JSON config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive the plant open loop and record telemetry.
    Simulate(SimulateArgs),
    /// Fit twin parameters to telemetry and score a held-out tail.
    Calibrate(CalibrateArgs),
    /// Train the model-free agents into a reservoir.
    Train(TrainArgs),
    /// Compare baseline, CRAH-only and CRAH&CHW control.
    Evaluate(EvaluateArgs),
    /// Run the loop behind the HTTP API.
    Serve(ServeArgs),
    /// Summaries and plot-ready CSVs from earlier artifacts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimMode {
    Baseline,
    Explore,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long, value_enum, default_value = "baseline")]
    pub mode: SimMode,
    /// Simulate a plant whose parameters are each off by ±10 %, drawn from
    /// this seed; the true values go to hidden.json.
    #[arg(long)]
    pub hidden_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Telemetry JSONL, as written by `simulate` or the loop.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub holdout_days: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Calibrated twin to train against; the config plant otherwise.
    #[arg(long)]
    pub twin: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    /// Strategy comparison over one trace.
    Comparison,
    /// Frozen vs recalibrating twin under a COP step.
    Drift,
    /// Pessimistic vs plain offline policies under partial coverage.
    Coverage,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,crah,crah_chw")]
    pub policies: Vec<String>,
    /// Reservoir directory from `train`; trained on the spot otherwise.
    #[arg(long)]
    pub reservoir: Option<PathBuf>,
    #[arg(long)]
    pub twin: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "comparison")]
    pub scenario: Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateMode {
    Off,
    On,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Environment variable holding the bearer token; no auth when unset.
    #[arg(long, default_value = "DLCF_API_TOKEN")]
    pub token_env: String,
    #[arg(long, value_enum, default_value = "off")]
    pub gate: GateMode,
    /// Simulated seconds a verification stays open.
    #[arg(long, default_value_t = 300.0)]
    pub timeout_s: f64,
    /// Wall seconds per simulated second while a verification is open.
    #[arg(long, default_value_t = 0.1)]
    pub wall_per_sim: f64,
    /// Wall-clock pause after each step.
    #[arg(long, default_value_t = 1000)]
    pub pacing_ms: u64,
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long)]
    pub reservoir: Option<PathBuf>,
    #[arg(long)]
    pub twin: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `evaluate` or `simulate`, or a run directory.
    #[arg(long)]
    pub input: PathBuf,
}

/// Calibrated twin parameters as written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinFile {
    pub schema_version: u32,
    pub params: TwinParams,
    pub initial_objective: f64,
    pub objective: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
}

impl TwinFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if t.schema_version != TWIN_SCHEMA_VERSION {
            return Err(CliError::Usage(format!("{}: unsupported schema_version {}", path.display(), t.schema_version)));
        }
        t.params.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Serialize)]
struct Versions {
    dlcf: &'static str,
    config_schema: u32,
    telemetry_schema: u32,
    report_schema: u32,
    twin_schema: u32,
}

/// Enough to re-run the command: the argv and the fully resolved config.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config: &'a DlcfConfig,
    versions: Versions,
    artifacts: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<dlcf_core::Error> for CliError {
    fn from(e: dlcf_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `dlcf --help` for usage.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            let diag = cli.out.join("diagnostic.txt");
            let written = fs::create_dir_all(&cli.out).and_then(|_| fs::write(&diag, format!("{msg}\n")));
            match written {
                Ok(()) => eprintln!("error: {msg}\ndiagnostic: {}", diag.display()),
                Err(_) => eprintln!("error: {msg}"),
            }
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<DlcfConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => DlcfConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => DlcfConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set_days(cfg: &mut DlcfConfig, days: Option<f64>) -> CliResult<()> {
    if let Some(d) = days {
        cfg.days = d;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn model_plant(cfg: &DlcfConfig, twin: Option<&Path>) -> CliResult<PlantConfig> {
    match twin {
        Some(p) => Ok(TwinFile::load(p)?.params.apply(&cfg.plant)),
        None => Ok(cfg.plant.clone()),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, command: &str, argv: &[String], cfg: &DlcfConfig, artifacts: &[&str]) -> CliResult<()> {
    let m = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command,
        argv: argv.to_vec(),
        seed: cfg.seed,
        config: cfg,
        versions: Versions {
            dlcf: env!("CARGO_PKG_VERSION"),
            config_schema: CONFIG_SCHEMA_VERSION,
            telemetry_schema: TELEMETRY_SCHEMA_VERSION,
            report_schema: REPORT_SCHEMA_VERSION,
            twin_schema: TWIN_SCHEMA_VERSION,
        },
        artifacts: artifacts.iter().map(|a| a.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let mut cfg = load_config(cli)?;
    let out = cli.out.as_path();
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Calibrate(_) => "calibrate",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Serve(_) => "serve",
        Command::Report(_) => "report",
    };
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let artifacts = match &cli.command {
        Command::Simulate(a) => {
            set_days(&mut cfg, a.days)?;
            cmd_simulate(&cfg, a, out)?
        }
        Command::Calibrate(a) => cmd_calibrate(&cfg, a, out)?,
        Command::Train(a) => cmd_train(&cfg, a, out)?,
        Command::Evaluate(a) => {
            set_days(&mut cfg, a.days)?;
            cmd_evaluate(&cfg, a, out)?
        }
        Command::Serve(a) => {
            set_days(&mut cfg, a.days)?;
            write_manifest(out, name, argv, &cfg, &["runs/"])?;
            return cmd_serve(&cfg, a, out);
        }
        Command::Report(a) => report::run(&cfg, &a.input, out)?,
    };
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(out, name, argv, &cfg, &refs)
}

fn cmd_simulate(cfg: &DlcfConfig, a: &SimulateArgs, out: &Path) -> CliResult<Vec<String>> {
    let mode = match a.mode {
        SimMode::Baseline => SimulateMode::Baseline,
        SimMode::Explore => SimulateMode::Explore,
    };
    let plant = match a.hidden_seed {
        Some(s) => perturb_hidden(&cfg.plant, s),
        None => cfg.plant.clone(),
    };
    let records = simulate(cfg, &plant, cfg.days, mode)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(out.join("telemetry.jsonl"), text)?;
    let mut artifacts = vec!["telemetry.jsonl".to_string()];
    if a.hidden_seed.is_some() {
        write_json(&out.join("hidden.json"), &TwinParams::from_config(&plant))?;
        artifacts.push("hidden.json".into());
    }
    println!("{} steps -> {}", records.len(), out.join("telemetry.jsonl").display());
    Ok(artifacts)
}

fn cmd_calibrate(cfg: &DlcfConfig, a: &CalibrateArgs, out: &Path) -> CliResult<Vec<String>> {
    if !a.data.is_file() {
        return Err(CliError::Usage(format!("telemetry file {} not found", a.data.display())));
    }
    let records = read_telemetry(&a.data)?;
    let data = dataset_from_telemetry(&records, &cfg.mdp)?;
    let held = cfg.steps(a.holdout_days);
    if held == 0 || data.len() <= held {
        return Err(CliError::Runtime(format!(
            "{} transitions cannot cover a {}-step holdout and a training set",
            data.len(),
            held
        )));
    }
    let (train, heldout) = data.split_at(data.len() - held);
    let mut report: CalibrationReport = calibrate_on(&train, &heldout, &cfg.plant, &cfg.calibration)?;
    let hidden = a.data.with_file_name("hidden.json");
    if hidden.is_file() {
        report.hidden = serde_json::from_str(&fs::read_to_string(&hidden)?).ok();
    }
    let twin = TwinFile {
        schema_version: TWIN_SCHEMA_VERSION,
        params: report.params.clone(),
        initial_objective: report.initial_objective,
        objective: report.objective,
        evaluations: report.evaluations,
        budget_exhausted: report.budget_exhausted,
    };
    write_json(&out.join("twin.json"), &twin)?;
    write_json(&out.join("calibration.json"), &report)?;
    report.write_csv(out.join("mape.csv"))?;
    println!("{:<40} {:>10} {:>10}", "feature", "before %", "after %");
    for m in &report.mape {
        println!("{:<40} {:>10.3} {:>10.3}", m.label, m.initial_pct, m.pct);
    }
    Ok(vec!["twin.json".into(), "calibration.json".into(), "mape.csv".into()])
}

fn cmd_train(cfg: &DlcfConfig, a: &TrainArgs, out: &Path) -> CliResult<Vec<String>> {
    let model = model_plant(cfg, a.twin.as_deref())?;
    let res = train_reservoir(cfg, &Twin::from_config(model)?, Some(&out.join("reservoir")))?;
    for r in res.records() {
        println!("{} ({:?}, {})", r.id, r.kind, r.scope.as_str());
    }
    Ok(vec!["reservoir/".into()])
}

fn open_reservoir(dir: &Path) -> CliResult<Reservoir> {
    if !dir.join("reservoir.json").is_file() {
        return Err(CliError::Usage(format!("{} holds no reservoir", dir.display())));
    }
    Ok(Reservoir::open(dir)?)
}

fn cmd_evaluate(cfg: &DlcfConfig, a: &EvaluateArgs, out: &Path) -> CliResult<Vec<String>> {
    match a.scenario {
        Scenario::Drift => {
            let dc = DriftConfig {
                days: cfg.days,
                ..DriftConfig::default()
            };
            let r = drift_experiment(cfg, &dc, Some(&out.join("runs")))?;
            write_json(&out.join("drift.json"), &r)?;
            println!(
                "power MAPE after drift: recalibrating {:.3} %, frozen {:.3} % (ratio {:.3})",
                r.assimilating_mape_pct,
                r.frozen_mape_pct,
                r.ratio()
            );
            return Ok(vec!["drift.json".into(), "runs/".into()]);
        }
        Scenario::Coverage => {
            let r = coverage_experiment(&cfg.plant, &cfg.mdp, &CoverageConfig::default())?;
            write_json(&out.join("coverage.json"), &r)?;
            println!(
                "steps inside the covered fan range: pessimistic {}/{}, plain {}/{}",
                r.inside_pessimistic, r.steps, r.inside_plain, r.steps
            );
            return Ok(vec!["coverage.json".into()]);
        }
        Scenario::Comparison => {}
    }
    let strategies = a
        .policies
        .iter()
        .map(|p| p.trim().parse::<Strategy>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let model = model_plant(cfg, a.twin.as_deref())?;
    let reservoir = a.reservoir.as_deref().map(open_reservoir).transpose()?;
    let report = evaluate_with(cfg, &model, reservoir.as_ref(), &strategies, Some(&out.join("runs")))?;
    report.write_json(out.join("report.json"))?;
    report.write_csv(out.join("report.csv"))?;
    println!("{:<10} {:>12} {:>9} {:>12}", "strategy", "energy kWh", "saving %", "compliance %");
    for r in &report.rows {
        println!(
            "{:<10} {:>12.1} {:>9.2} {:>12.2}",
            r.strategy.as_str(),
            r.energy_kwh,
            r.savings_pct,
            r.compliance_pct
        );
    }
    Ok(vec!["report.json".into(), "report.csv".into(), "runs/".into()])
}

fn cmd_serve(cfg: &DlcfConfig, a: &ServeArgs, out: &Path) -> CliResult<()> {
    let ip: std::net::IpAddr = a
        .bind
        .parse()
        .map_err(|_| CliError::Usage(format!("`{}` is not an IP address", a.bind)))?;
    let addr = SocketAddr::new(ip, a.port);
    let trace = cfg.trace_for(cfg.days)?;
    let model = model_plant(cfg, a.twin.as_deref())?;
    let twin = Twin::from_config(model)?;
    let reservoir = match &a.reservoir {
        Some(d) => open_reservoir(d)?,
        None => train_reservoir(cfg, &twin, None)?,
    };
    let runs = out.join("runs");
    let mut lc = loop_config(cfg, &cfg.control_loop.run_id, cfg.control_loop.scope);
    lc.runs_dir = Some(runs.clone());
    lc.pacing_ms = a.pacing_ms;
    lc.gate = match a.gate {
        GateMode::Off => GateConfig::Off,
        GateMode::On => GateConfig::On { timeout_s: a.timeout_s },
    };
    let hub = Arc::new(Hub::new(&lc.run_id, 1024));
    let setup = LoopSetup {
        plant: warm_plant(cfg.plant.clone(), &trace)?,
        twin,
        reservoir,
        trace: trace.clone(),
        spec: cfg.mdp.clone(),
    };
    let mut orch = Orchestrator::new(lc, setup)?.with_sink(hub.clone());
    let decisions = match a.gate {
        GateMode::On => {
            let (src, handle) = ChannelDecisions::new(a.wall_per_sim);
            orch = orch.with_decisions(Box::new(src));
            Some(handle)
        }
        GateMode::Off => None,
    };
    let token = std::env::var(&a.token_env).ok().filter(|t| !t.is_empty());
    let state = AppState {
        hub: hub.clone(),
        decisions,
        cfg: GatewayConfig {
            token,
            runs_dir: Some(runs),
            ..GatewayConfig::default()
        },
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = dlcf_gateway::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let _worker = spawn_loop(orch, hub, trace.len());
        println!("serving on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        dlcf_gateway::serve(listener, state, shutdown)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

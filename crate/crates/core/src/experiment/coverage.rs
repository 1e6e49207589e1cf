use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{train_with_ensemble, OfflineConfig, Policy};
use crate::error::Result;
use crate::mdp::MdpSpec;
use crate::plant::{self, ControlAction, ExoTrace, NoiseConfig, PlantConfig, PlantState, TraceConfig};
use crate::safety::{ActionBounds, Interval, SlaEnvelope, BASELINE_CHWS, SAT_LIMITS};
use crate::twin::{disagreement_quantile, explore, fit_residual, Controller, Twin, UncertaintyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    /// Light load, so the unconstrained optimum lies below the covered fans.
    pub mean_load_kw: f64,
    pub data_days: f64,
    pub eval_days: f64,
    /// Fan ratios the offline data covers.
    pub fan: Interval,
    /// Disagreement quantile over the data used as the HALT threshold.
    pub quantile: f64,
    pub halt_penalty: f64,
    pub data_seed: u64,
    pub trace_seed: u64,
    pub eval_seed: u64,
    pub offline: OfflineConfig,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            mean_load_kw: 300.0,
            data_days: 4.0,
            eval_days: 2.0,
            fan: Interval::new(0.6, 0.9),
            quantile: 0.99,
            halt_penalty: 200.0,
            data_seed: 5,
            trace_seed: 2024,
            eval_seed: 99,
            offline: OfflineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub schema_version: u32,
    pub threshold: f64,
    pub steps: usize,
    pub inside_pessimistic: usize,
    pub inside_plain: usize,
    pub violations_pessimistic: usize,
    pub violations_plain: usize,
}

impl CoverageReport {
    pub fn fraction_pessimistic(&self) -> f64 {
        self.inside_pessimistic as f64 / self.steps.max(1) as f64
    }

    pub fn fraction_plain(&self) -> f64 {
        self.inside_plain as f64 / self.steps.max(1) as f64
    }
}

/// Steps whose fan ratio lies in `fan`, and SLA violations, when `policy`
/// runs the true plant over `trace`.
fn deploy(policy: &Policy, plant_cfg: &PlantConfig, trace: &ExoTrace, spec: &MdpSpec, fan: Interval) -> Result<(usize, usize)> {
    let c = policy.controller(None, spec);
    let warm = ControlAction::uniform(7.0, 22.0, 0.85, plant_cfg.n_crah);
    let mut s = plant::settle(PlantState::at_rest(22.0, 0.009), &warm, &trace.at(0), plant_cfg, 20)?;
    let sla = SlaEnvelope::default();
    let (mut inside, mut viol) = (0, 0);
    for exo in &trace.samples {
        let a = c.act(&s, exo)?;
        if a.crah_fan_ratio.iter().all(|&f| f >= fan.lo - 1e-9 && f <= fan.hi + 1e-9) {
            inside += 1;
        }
        s = plant::step(&s, &a, exo, plant_cfg)?;
        if !sla.is_compliant(&s) {
            viol += 1;
        }
    }
    Ok((inside, viol))
}

/// Trains a pessimistic and a plain offline policy on the same ensemble,
/// fitted to data covering only `cfg.fan`, and deploys both on the same
/// evaluation trace.
pub fn coverage_experiment(plant_cfg: &PlantConfig, spec: &MdpSpec, cfg: &CoverageConfig) -> Result<CoverageReport> {
    let dt = plant_cfg.timestep;
    let steps = |days: f64| (days * 86_400.0 / dt).round() as usize;
    let tc = TraceConfig {
        mean_load_kw: cfg.mean_load_kw,
        seed: cfg.trace_seed,
        ..TraceConfig::default()
    };
    let trace = ExoTrace::synthetic(&tc, dt, steps(cfg.data_days));
    let bounds = ActionBounds::uniform(
        plant_cfg.n_crah,
        Interval::new(BASELINE_CHWS, BASELINE_CHWS),
        SAT_LIMITS,
        cfg.fan,
    );
    let data = explore(plant_cfg, &trace, &bounds, &NoiseConfig::default(), cfg.data_seed)?;
    let ens = Arc::new(fit_residual(&data, plant_cfg, &cfg.offline.piml, &cfg.offline.train)?);
    let twin = Twin::from_config(plant_cfg.clone())?.with_ensemble(ens.clone())?;
    let threshold = disagreement_quantile(&twin, &data, cfg.quantile)?;
    let eval = ExoTrace::synthetic(&TraceConfig { seed: cfg.eval_seed, ..tc }, dt, steps(cfg.eval_days));
    let train = |th: f64| {
        let u = UncertaintyConfig {
            disagreement_threshold: th,
            halt_penalty: cfg.halt_penalty,
        };
        train_with_ensemble("offline", &data, plant_cfg, ens.clone(), &u, spec, &cfg.offline)
    };
    let pess = train(threshold)?;
    let plain = train(f64::INFINITY)?;
    let (inside_pessimistic, violations_pessimistic) = deploy(&pess, plant_cfg, &eval, spec, cfg.fan)?;
    let (inside_plain, violations_plain) = deploy(&plain, plant_cfg, &eval, spec, cfg.fan)?;
    Ok(CoverageReport {
        schema_version: super::REPORT_SCHEMA_VERSION,
        threshold,
        steps: eval.len(),
        inside_pessimistic,
        inside_plain,
        violations_pessimistic,
        violations_plain,
    })
}

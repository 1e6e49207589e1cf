use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DlcfConfig;
use crate::error::{Error, Result};
use crate::plant::{self, PlantConfig, PlantState};
use crate::safety::{ActionBounds, Scope};
use crate::twin::{calibrate, explore, feature_mape, CalibrationConfig, Dataset, Feature, ParamName, TwinParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMape {
    pub feature: Feature,
    pub label: String,
    /// Held-out MAPE under the starting parameters.
    pub initial_pct: f64,
    pub pct: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub train_transitions: usize,
    pub heldout_transitions: usize,
    pub initial_objective: f64,
    pub objective: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    pub params: TwinParams,
    /// Ground-truth values, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<TwinParams>,
    pub mape: Vec<FeatureMape>,
}

impl CalibrationReport {
    pub fn mape_of(&self, f: Feature) -> Option<f64> {
        self.mape.iter().find(|m| m.feature == f).map(|m| m.pct)
    }

    /// `feature,label,initial_pct,pct,n` rows.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "label", "initial_pct", "pct", "n"])?;
        for m in &self.mape {
            w.write_record([
                m.feature.key().to_string(),
                m.label.clone(),
                m.initial_pct.to_string(),
                m.pct.to_string(),
                m.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `cfg` with every calibratable parameter scaled by 0.9 or 1.1 (sign drawn
/// from `seed`).
pub fn perturb_hidden(cfg: &PlantConfig, seed: u64) -> PlantConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cfg.clone();
    for p in ParamName::ALL {
        let f = if rng.random_bool(0.5) { 1.1 } else { 0.9 };
        let v = p.read(cfg);
        p.write(&mut out, v * f);
    }
    out
}

fn one_step(data: &Dataset, cfg: &PlantConfig) -> Result<(Vec<PlantState>, Vec<PlantState>)> {
    let mut obs = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for tr in &data.transitions {
        pred.push(plant::step(&tr.s, &tr.a, &tr.exo, cfg)?);
        obs.push(tr.s_next.clone());
    }
    Ok((obs, pred))
}

/// Fits θ on `train` from the nominal values in `base`, then scores one-step
/// predictions on `heldout` for every feature the calibrator fits.
pub fn calibrate_on(
    train: &Dataset,
    heldout: &Dataset,
    base: &PlantConfig,
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    let theta0 = TwinParams::from_config(base);
    let res = calibrate(train, base, &theta0, cfg)?;
    let fitted = res.params.apply(base);
    let (obs, pred0) = one_step(heldout, base)?;
    let (_, pred) = one_step(heldout, &fitted)?;
    let mut mape = Vec::new();
    for f in Feature::CALIBRATION {
        let before = feature_mape(f, &obs, &pred0)?;
        let after = feature_mape(f, &obs, &pred)?;
        mape.push(FeatureMape {
            feature: f,
            label: f.label().into(),
            initial_pct: before.pct,
            pct: after.pct,
            n: after.n,
        });
    }
    Ok(CalibrationReport {
        schema_version: super::REPORT_SCHEMA_VERSION,
        train_transitions: train.len(),
        heldout_transitions: heldout.len(),
        initial_objective: res.initial_objective,
        objective: res.objective,
        evaluations: res.evaluations,
        budget_exhausted: res.budget_exhausted,
        params: res.params,
        hidden: None,
        mape,
    })
}

/// Telemetry from a plant whose parameters are hidden and off by ±10 %,
/// operated with random setpoints for `days`; the last day is held out.
pub fn calibration_experiment(cfg: &DlcfConfig, days: f64, hidden_seed: u64) -> Result<CalibrationReport> {
    if days < 2.0 {
        return Err(Error::Config("the calibration experiment needs at least 2 days".into()));
    }
    let hidden = perturb_hidden(&cfg.plant, hidden_seed);
    let trace = cfg.trace_for(days)?;
    let bounds = ActionBounds::for_scope(Scope::CrahChw, cfg.plant.n_crah);
    let data = explore(&hidden, &trace, &bounds, &cfg.noise, cfg.seed)?;
    let held = cfg.steps(1.0);
    let (train, heldout) = data.split_at(data.len() - held);
    let mut report = calibrate_on(&train, &heldout, &cfg.plant, &cfg.calibration)?;
    report.hidden = Some(TwinParams::from_config(&hidden));
    Ok(report)
}

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, PlantConfig};
use crate::twin::{calibrate, CalibrationConfig, Dataset, ParamName, Provenance, Transition, Twin, TwinParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecalibrationConfig {
    pub enabled: bool,
    /// Rolling window length, steps.
    pub window: usize,
    /// Rolling one-step power MAPE that triggers a refit, percent.
    pub threshold_pct: f64,
    /// Parameters refitted on the window.
    pub params: Vec<ParamName>,
    pub calibration: CalibrationConfig,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 96,
            threshold_pct: 5.0,
            params: vec![
                ParamName::ChillerCopRef,
                ParamName::CopChwsSlope,
                ParamName::CopCondSlope,
                ParamName::TowerApproach,
                ParamName::RatedFanPower,
                ParamName::RatedChwPumpPower,
            ],
            calibration: CalibrationConfig {
                max_evals_per_start: 1500,
                restarts: 2,
                ftol: 1e-7,
                ..CalibrationConfig::default()
            },
        }
    }
}

impl RecalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.window == 0 || self.params.is_empty()) {
            return Err(Error::Config("recalibration needs a window and parameters".into()));
        }
        if !(self.threshold_pct >= 0.0) {
            return Err(Error::Config("recalibration threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Recent sensed transitions with the twin's power error on each.
#[derive(Debug, Clone, Default)]
pub struct TelemetryWindow {
    pub capacity: usize,
    pub entries: VecDeque<(Transition, f64)>,
}

impl TelemetryWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, tr: Transition, ape_pct: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((tr, ape_pct));
    }

    pub fn is_full(&self) -> bool {
        self.capacity > 0 && self.entries.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean power APE over the window; 0 when empty.
    pub fn mape(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().map(|e| e.1).sum::<f64>() / self.entries.len() as f64
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(
            Provenance::Telemetry,
            self.entries.iter().map(|e| e.0.clone()).collect(),
        )
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Mean absolute percentage error of one-step physics power predictions
/// over `data` under `cfg`.
pub fn replay_power_mape(data: &Dataset, cfg: &PlantConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in &data.transitions {
        let pred = plant::step(&tr.s, &tr.a, &tr.exo, cfg)?;
        let obs = tr.s_next.total_power();
        if obs > 0.0 {
            sum += (pred.total_power() - obs).abs() / obs * 100.0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Outcome of a triggered refit.
#[derive(Debug, Clone, PartialEq)]
pub struct Refit {
    /// New full parameter vector for the twin; `None` keeps the old one.
    pub params: Option<TwinParams>,
    pub window_mape_after_pct: f64,
    pub reason: Option<String>,
}

/// Refits `cfg.params` on the window, starting from the twin's current
/// values. The new vector is returned only if calibration converged within
/// budget and it lowers the window's power MAPE.
pub fn maybe_recalibrate(window: &TelemetryWindow, twin: &Twin, cfg: &RecalibrationConfig) -> Result<Option<Refit>> {
    if !cfg.enabled || window.len() < cfg.window.max(1) || window.mape() <= cfg.threshold_pct {
        return Ok(None);
    }
    let data = window.dataset()?;
    let base = twin.config();
    let before = replay_power_mape(&data, base)?;
    let theta0 = TwinParams::subset(base, &cfg.params);
    let res = calibrate(&data, base, &theta0, &cfg.calibration)?;
    if res.budget_exhausted {
        log::warn!("recalibration budget exhausted; keeping parameters");
        return Ok(Some(Refit {
            params: None,
            window_mape_after_pct: before,
            reason: Some("calibration budget exhausted".into()),
        }));
    }
    let mut full = twin.params().clone();
    for p in &res.params.params {
        if full.get(p.name).is_none() {
            return Err(Error::Config(format!("twin does not expose parameter {:?}", p.name)));
        }
        full.set(p.name, p.value)?;
    }
    let after = replay_power_mape(&data, &full.apply(base))?;
    if after >= before {
        return Ok(Some(Refit {
            params: None,
            window_mape_after_pct: before,
            reason: Some("refit did not improve the window".into()),
        }));
    }
    Ok(Some(Refit {
        params: Some(full),
        window_mape_after_pct: after,
        reason: None,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{sense, ControlAction, ExoTrace, NoiseConfig, PlantState, TraceConfig};

    fn window_from(truth: &PlantConfig, n: usize) -> TelemetryWindow {
        let trace = ExoTrace::synthetic(&TraceConfig::default(), truth.timestep, n);
        let a = ControlAction::uniform(7.0, 22.0, 0.85, truth.n_crah);
        let mut s = plant::settle(PlantState::at_rest(24.0, 0.008), &a, &trace.at(0), truth, 40).unwrap();
        let noise = NoiseConfig::default();
        let mut z = sense(&s, &noise, 0).values;
        let mut w = TelemetryWindow::new(n);
        for (k, exo) in trace.samples.iter().enumerate() {
            let next = plant::step(&s, &a, exo, truth).unwrap();
            let z_next = sense(&next, &noise, k as u64 + 1).values;
            w.push(
                Transition {
                    t: k as f64,
                    s: z,
                    a: a.clone(),
                    r: 0.0,
                    s_next: z_next.clone(),
                    exo: *exo,
                },
                10.0,
            );
            s = next;
            z = z_next;
        }
        w
    }

    #[test]
    fn window_is_bounded_and_averages() {
        let mut w = TelemetryWindow::new(2);
        let tr = window_from(&PlantConfig::default(), 1).entries[0].0.clone();
        w.push(tr.clone(), 1.0);
        w.push(tr.clone(), 2.0);
        w.push(tr, 6.0);
        assert_eq!(w.len(), 2);
        assert_eq!(w.mape(), 4.0);
    }

    #[test]
    fn below_threshold_or_partial_window_is_a_noop() {
        let twin = Twin::from_config(PlantConfig::default()).unwrap();
        let w = window_from(&PlantConfig::default(), 24);
        let cfg = RecalibrationConfig {
            window: 24,
            threshold_pct: 50.0,
            ..RecalibrationConfig::default()
        };
        assert!(maybe_recalibrate(&w, &twin, &cfg).unwrap().is_none());
        let cfg = RecalibrationConfig {
            window: 48,
            threshold_pct: 1.0,
            ..RecalibrationConfig::default()
        };
        assert!(maybe_recalibrate(&w, &twin, &cfg).unwrap().is_none());
    }

    #[test]
    fn refit_recovers_drifted_cop() {
        let mut truth = PlantConfig::default();
        truth.chiller_cop_ref *= 1.1;
        let w = window_from(&truth, 96);
        let twin = Twin::from_config(PlantConfig::default()).unwrap();
        let cfg = RecalibrationConfig {
            threshold_pct: 1.0,
            ..RecalibrationConfig::default()
        };
        let before = replay_power_mape(&w.dataset().unwrap(), twin.config()).unwrap();
        let refit = maybe_recalibrate(&w, &twin, &cfg).unwrap().expect("triggered");
        let params = refit.params.expect("applied");
        assert!(refit.window_mape_after_pct < before);
        let cop = params.get(ParamName::ChillerCopRef).unwrap();
        assert!((cop / truth.chiller_cop_ref - 1.0).abs() < 0.05, "cop {cop}");
    }
}

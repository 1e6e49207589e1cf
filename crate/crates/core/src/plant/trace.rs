//! Exogenous traces: IT load and outdoor wet bulb at each control step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExogenousInput;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    time_s: f64,
    it_load_kw: f64,
    outdoor_wetbulb_c: f64,
}

/// A time-indexed disturbance sequence with a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExoTrace {
    pub timestep: f64,
    pub samples: Vec<ExogenousInput>,
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub mean_load_kw: f64,
    /// Half the daily peak-to-trough swing.
    pub daily_load_amplitude_kw: f64,
    pub load_noise_kw: f64,
    pub mean_wetbulb_c: f64,
    pub daily_wetbulb_amplitude_c: f64,
    pub wetbulb_noise_c: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            mean_load_kw: 535.0,
            daily_load_amplitude_kw: 25.0,
            load_noise_kw: 5.0,
            mean_wetbulb_c: 26.0,
            daily_wetbulb_amplitude_c: 1.5,
            wetbulb_noise_c: 0.2,
            seed: 2024,
        }
    }
}

impl ExoTrace {
    /// Diurnal sinusoids plus AR(1) noise. Load peaks mid-afternoon.
    pub fn synthetic(cfg: &TraceConfig, timestep: f64, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let day = 86_400.0;
        let mut load_noise = 0.0;
        let mut wb_noise = 0.0;
        let samples = (0..steps)
            .map(|k| {
                let t = k as f64 * timestep;
                let phase = 2.0 * std::f64::consts::PI * (t / day);
                load_noise = 0.8 * load_noise + cfg.load_noise_kw * rng.random_range(-1.0..1.0);
                wb_noise = 0.9 * wb_noise + cfg.wetbulb_noise_c * rng.random_range(-1.0..1.0);
                let load = cfg.mean_load_kw
                    + cfg.daily_load_amplitude_kw * (phase - 2.0 * std::f64::consts::PI * 9.0 / 24.0).sin()
                    + load_noise;
                let wb = cfg.mean_wetbulb_c
                    + cfg.daily_wetbulb_amplitude_c * (phase - 2.0 * std::f64::consts::PI * 10.0 / 24.0).sin()
                    + wb_noise;
                ExogenousInput {
                    it_load: load.max(0.0),
                    outdoor_wetbulb: wb,
                }
            })
            .collect();
        Self { timestep, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample at step `k`, holding the last value past the end.
    pub fn at(&self, k: usize) -> ExogenousInput {
        self.samples[k.min(self.samples.len().saturating_sub(1))]
    }

    /// `len` samples starting at `k`, padded with the last value.
    pub fn window(&self, k: usize, len: usize) -> Vec<ExogenousInput> {
        (k..k + len).map(|i| self.at(i)).collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr
            .deserialize::<TraceRow>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let timestep = match rows.as_slice() {
            [a, b, ..] => b.time_s - a.time_s,
            _ => 900.0,
        };
        if !(timestep > 0.0) {
            return Err(Error::Dataset(format!(
                "{}: time_s must be strictly increasing",
                path.display()
            )));
        }
        let samples = rows
            .into_iter()
            .map(|r| {
                let exo = ExogenousInput {
                    it_load: r.it_load_kw,
                    outdoor_wetbulb: r.outdoor_wetbulb_c,
                };
                exo.validate().map(|_| exo)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { timestep, samples })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for (k, s) in self.samples.iter().enumerate() {
            w.serialize(TraceRow {
                time_s: k as f64 * self.timestep,
                it_load_kw: s.it_load,
                outdoor_wetbulb_c: s.outdoor_wetbulb,
            })?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

//! The run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::ModelFreeConfig;
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::orchestrator::LoopConfig;
use crate::plant::{ExoTrace, NoiseConfig, PlantConfig, TraceConfig};
use crate::twin::CalibrationConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlcfConfig {
    pub schema_version: u32,
    /// Ground-truth plant.
    pub plant: PlantConfig,
    /// Synthetic disturbance generator, used unless `trace_csv` is set.
    pub trace: TraceConfig,
    pub trace_csv: Option<PathBuf>,
    pub days: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub mdp: MdpSpec,
    #[serde(rename = "loop")]
    pub control_loop: LoopConfig,
    pub model_free: ModelFreeConfig,
    pub calibration: CalibrationConfig,
}

impl Default for DlcfConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            plant: PlantConfig::default(),
            trace: TraceConfig::default(),
            trace_csv: None,
            days: 7.0,
            seed: 7,
            noise: NoiseConfig::default(),
            mdp: MdpSpec::default(),
            control_loop: LoopConfig::default(),
            model_free: ModelFreeConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl DlcfConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if !(self.days >= 0.0) || !self.days.is_finite() {
            return Err(Error::Config(format!("days = {} must be >= 0", self.days)));
        }
        self.plant.validate()?;
        self.mdp.validate()?;
        self.control_loop.validate()
    }

    /// Control steps in `days`.
    pub fn steps(&self, days: f64) -> usize {
        (days * 86_400.0 / self.plant.timestep).round() as usize
    }

    /// The disturbance trace for `days`, from `trace_csv` when set.
    pub fn trace_for(&self, days: f64) -> Result<ExoTrace> {
        let steps = self.steps(days);
        match &self.trace_csv {
            Some(p) => {
                let t = ExoTrace::read_csv(p)?;
                if (t.timestep - self.plant.timestep).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "trace timestep {} differs from the plant timestep {}",
                        t.timestep, self.plant.timestep
                    )));
                }
                if t.len() < steps {
                    return Err(Error::Config(format!("trace has {} steps, need {steps}", t.len())));
                }
                Ok(ExoTrace {
                    timestep: t.timestep,
                    samples: t.samples[..steps].to_vec(),
                })
            }
            None => Ok(ExoTrace::synthetic(&self.trace, self.plant.timestep, steps)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_rejects_unknown_fields() {
        let c = DlcfConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DlcfConfig>(&json).unwrap(), c);
        assert!(serde_json::from_str::<DlcfConfig>(r#"{"dayz": 3}"#).is_err());
        let partial: DlcfConfig = serde_json::from_str(r#"{"days": 2, "seed": 3}"#).unwrap();
        assert_eq!(partial.steps(partial.days), 192);
        assert_eq!(partial.seed, 3);
    }

    #[test]
    fn validation() {
        let mut c = DlcfConfig::default();
        c.days = -1.0;
        assert!(c.validate().is_err());
        c.days = 1.0;
        c.schema_version = 2;
        assert!(c.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{PlantState, SensorReading, STATE_DIM};

/// Gaussian belief over the plant state with a diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub mean: [f64; STATE_DIM],
    pub variance: [f64; STATE_DIM],
    pub sim_time: f64,
}

impl StateEstimate {
    pub fn new(state: &PlantState, variance: [f64; STATE_DIM]) -> Result<Self> {
        if let Some(&v) = variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::OutOfRange {
                what: "variance",
                value: v,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(Self {
            mean: state.to_vec(),
            variance,
            sim_time: state.sim_time,
        })
    }

    /// Point estimate as a physically admissible state.
    pub fn state(&self) -> PlantState {
        PlantState::from_vec(&self.mean, self.sim_time)
    }
}

/// Per-field scalar Kalman update.
///
/// The prior variance is inflated by `process_var` before the update. When
/// both the inflated prior and the measurement variance are zero the
/// measurement wins.
///
/// ```
/// use dlcf_core::plant::{PlantState, SensorReading, NoiseConfig};
/// use dlcf_core::twin::{assimilate, StateEstimate};
/// let mut s = PlantState::at_rest(24.0, 0.008);
/// let prior = StateEstimate::new(&s, [1.0; 12]).unwrap();
/// s.cold_aisle_temp = 26.0;
/// let z = SensorReading { reading_time: 0.0, values: s, noise: NoiseConfig::noiseless() };
/// let post = assimilate(&prior, &z, &[0.0; 12], &[1.0; 12]).unwrap();
/// assert_eq!(post.mean[0], 25.0);
/// assert_eq!(post.variance[0], 0.5);
/// ```
pub fn assimilate(
    prior: &StateEstimate,
    reading: &SensorReading,
    process_var: &[f64; STATE_DIM],
    measurement_var: &[f64; STATE_DIM],
) -> Result<StateEstimate> {
    for &v in process_var.iter().chain(measurement_var) {
        if !(v >= 0.0) {
            return Err(Error::OutOfRange {
                what: "variance",
                value: v,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
    }
    let z = reading.values.to_vec();
    let mut mean = prior.mean;
    let mut variance = prior.variance;
    for i in 0..STATE_DIM {
        let p = prior.variance[i] + process_var[i];
        let r = measurement_var[i];
        let gain = if r.is_infinite() {
            0.0
        } else if p + r == 0.0 {
            1.0
        } else {
            p / (p + r)
        };
        mean[i] = prior.mean[i] + gain * (z[i] - prior.mean[i]);
        variance[i] = (1.0 - gain) * p;
    }
    Ok(StateEstimate {
        mean,
        variance,
        sim_time: reading.reading_time,
    })
}

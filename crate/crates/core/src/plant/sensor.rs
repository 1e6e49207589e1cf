use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{field, PlantState, STATE_DIM};

/// Standard deviations of the sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Absolute, °C.
    pub temperature: f64,
    /// Relative to the reading.
    pub power_fraction: f64,
    /// Absolute, kg/kg.
    pub humidity_ratio: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            power_fraction: 0.01,
            humidity_ratio: 0.0002,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            temperature: 0.0,
            power_fraction: 0.0,
            humidity_ratio: 0.0,
        }
    }

    /// Per-field standard deviation for a given true state.
    pub fn sigmas(&self, state: &PlantState) -> [f64; STATE_DIM] {
        let v = state.to_vec();
        let mut s = [0.0; STATE_DIM];
        for (i, sigma) in s.iter_mut().enumerate() {
            *sigma = match i {
                field::HUMIDITY => self.humidity_ratio,
                field::COIL_HEAT => self.power_fraction * v[i].abs(),
                i if field::POWERS.contains(&i) => self.power_fraction * v[i].abs(),
                _ => self.temperature,
            };
        }
        s
    }

    /// Per-field measurement variance, floored so the filter never divides
    /// by zero on idle equipment.
    pub fn variances(&self, state: &PlantState) -> [f64; STATE_DIM] {
        self.sigmas(state).map(|s| (s * s).max(1e-12))
    }
}

/// A noisy observation of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub reading_time: f64,
    pub values: PlantState,
    pub noise: NoiseConfig,
}

/// Samples a reading: true state plus zero-mean Gaussian noise, clipped to
/// admissible ranges. Deterministic for a given seed.
pub fn sense(state: &PlantState, noise: &NoiseConfig, seed: u64) -> SensorReading {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = state.to_vec();
    let sigmas = noise.sigmas(state);
    let mut noisy = truth;
    for (i, v) in noisy.iter_mut().enumerate() {
        let sigma = sigmas[i];
        if sigma > 0.0 {
            // sigma is finite and positive, so the distribution is valid.
            let n = Normal::new(0.0, sigma).expect("valid sigma");
            *v += n.sample(&mut rng);
        }
        if i == field::HUMIDITY || field::POWERS.contains(&i) {
            *v = v.max(0.0);
        } else if i != field::COIL_HEAT {
            *v = v.clamp(-50.0, 100.0);
        }
    }
    let mut values = PlantState::from_vec(&noisy, state.sim_time);
    // from_vec would otherwise lift a noisy return-water reading onto the
    // supply reading; sensors report what they see.
    values.chw_return_temp = noisy[field::CHW_RETURN];
    SensorReading {
        reading_time: state.sim_time,
        values,
        noise: *noise,
    }
}

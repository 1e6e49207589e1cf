use serde::{Deserialize, Serialize};

use crate::plant::PlantState;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    /// Signed distance outside the interval; negative inside.
    pub fn excess(&self, v: f64) -> f64 {
        (v - self.hi).max(self.lo - v)
    }
}

/// Hard operating envelope at the IT inlet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlaEnvelope {
    /// °C.
    pub inlet_temp: Interval,
    /// Percent.
    pub relative_humidity: Interval,
    /// Violation threshold on the constraint value.
    pub tolerance: f64,
    /// Converts RH percentage points into °C-equivalent units.
    pub rh_scale: f64,
}

impl Default for SlaEnvelope {
    fn default() -> Self {
        Self {
            inlet_temp: Interval::new(18.0, 27.0),
            relative_humidity: Interval::new(30.0, 60.0),
            tolerance: 0.0,
            rh_scale: 0.2,
        }
    }
}

impl SlaEnvelope {
    /// A narrower envelope, used as the planning target so that model error
    /// does not push the real plant across the hard limits.
    pub fn tightened(&self, temp_margin: f64, rh_margin: f64) -> Self {
        Self {
            inlet_temp: Interval::new(
                self.inlet_temp.lo + temp_margin,
                self.inlet_temp.hi - temp_margin,
            ),
            relative_humidity: Interval::new(
                self.relative_humidity.lo + rh_margin,
                self.relative_humidity.hi - rh_margin,
            ),
            ..*self
        }
    }

    /// Constraint value `C`: the largest normalized signed excursion over all
    /// constraints. `C <= 0` inside the envelope.
    pub fn constraint_value(&self, inlet_temp: f64, rh: f64) -> f64 {
        let temp = self.inlet_temp.excess(inlet_temp);
        let hum = self.rh_scale * self.relative_humidity.excess(rh);
        if temp.is_nan() || hum.is_nan() {
            f64::INFINITY
        } else {
            temp.max(hum)
        }
    }

    pub fn constraint_for(&self, state: &PlantState) -> f64 {
        if state.halted {
            return f64::INFINITY;
        }
        self.constraint_value(state.cold_aisle_temp, state.inlet_rh())
    }

    pub fn is_compliant(&self, state: &PlantState) -> bool {
        self.constraint_for(state) <= self.tolerance
    }

    /// Sum of raw excursions (°C plus RH points); zero when compliant.
    pub fn violation_magnitude(&self, inlet_temp: f64, rh: f64) -> f64 {
        if inlet_temp.is_nan() || rh.is_nan() {
            return f64::INFINITY;
        }
        self.inlet_temp.excess(inlet_temp).max(0.0) + self.relative_humidity.excess(rh).max(0.0)
    }

    pub fn violation_for(&self, state: &PlantState) -> f64 {
        self.violation_magnitude(state.cold_aisle_temp, state.inlet_rh())
    }
}

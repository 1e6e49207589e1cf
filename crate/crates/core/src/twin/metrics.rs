use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{field, PlantState};

/// Mean absolute percentage error with the count of samples it covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub pct: f64,
    pub n: usize,
    /// Samples skipped because the observation was zero.
    pub excluded: usize,
}

/// `100/N · Σ |y − ŷ| / |y|`. Samples with `y == 0` are skipped and counted
/// in [`Mape::excluded`].
///
/// ```
/// use dlcf_core::twin::mape;
/// let m = mape(&[100.0, 200.0], &[90.0, 210.0]).unwrap();
/// assert!((m.pct - 7.5).abs() < 1e-12);
/// ```
pub fn mape(observed: &[f64], predicted: &[f64]) -> Result<Mape> {
    if observed.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (&y, &p) in observed.iter().zip(predicted) {
        if y == 0.0 {
            continue;
        }
        sum += ((y - p) / y).abs();
        n += 1;
    }
    let excluded = observed.len() - n;
    if excluded > 0 {
        log::warn!("mape: {excluded} zero observations excluded");
    }
    if n == 0 {
        return Err(Error::Dataset("mape: no nonzero observations".into()));
    }
    Ok(Mape {
        pct: 100.0 * sum / n as f64,
        n,
        excluded,
    })
}

/// Features scored against the plant, mirroring the twin accuracy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    ReturnAirTemp,
    ChwReturnTemp,
    CoolingLoad,
    ChwPumpPower,
    ChillerPower,
    TotalPower,
    CrahFanPower,
    ColdAisleTemp,
}

impl Feature {
    /// The accuracy-table rows, in order.
    pub const TABLE: [Feature; 6] = [
        Feature::ReturnAirTemp,
        Feature::ChwReturnTemp,
        Feature::CoolingLoad,
        Feature::ChwPumpPower,
        Feature::ChillerPower,
        Feature::TotalPower,
    ];

    /// Table rows plus the fan power and inlet temperature the calibrator
    /// also fits.
    pub const CALIBRATION: [Feature; 8] = [
        Feature::ReturnAirTemp,
        Feature::ChwReturnTemp,
        Feature::CoolingLoad,
        Feature::ChwPumpPower,
        Feature::ChillerPower,
        Feature::TotalPower,
        Feature::CrahFanPower,
        Feature::ColdAisleTemp,
    ];

    pub fn of(&self, s: &PlantState) -> f64 {
        match self {
            Feature::ReturnAirTemp => s.return_air_temp,
            Feature::ChwReturnTemp => s.chw_return_temp,
            Feature::CoolingLoad => s.coil_heat,
            Feature::ChwPumpPower => s.power.chw_pumps,
            Feature::ChillerPower => s.power.chillers,
            Feature::TotalPower => s.total_power(),
            Feature::CrahFanPower => s.power.crah_fans,
            Feature::ColdAisleTemp => s.cold_aisle_temp,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Feature::ReturnAirTemp => "CRAH averaged return air temperature",
            Feature::ChwReturnTemp => "Chilled water return temperature",
            Feature::CoolingLoad => "Chiller plant total cooling load",
            Feature::ChwPumpPower => "Total chilled water pump power",
            Feature::ChillerPower => "Total chiller power",
            Feature::TotalPower => "Total cooling plant power",
            Feature::CrahFanPower => "Total CRAH fan power",
            Feature::ColdAisleTemp => "Cold aisle inlet temperature",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Feature::ReturnAirTemp => "return_air_temp_c",
            Feature::ChwReturnTemp => "chw_return_temp_c",
            Feature::CoolingLoad => "cooling_load_kw",
            Feature::ChwPumpPower => "chw_pump_power_kw",
            Feature::ChillerPower => "chiller_power_kw",
            Feature::TotalPower => "total_power_kw",
            Feature::CrahFanPower => "crah_fan_power_kw",
            Feature::ColdAisleTemp => "cold_aisle_temp_c",
        }
    }

    /// Index into [`PlantState::to_vec`] when the feature is a single field.
    pub fn field(&self) -> Option<usize> {
        match self {
            Feature::ReturnAirTemp => Some(field::RETURN_AIR),
            Feature::ChwReturnTemp => Some(field::CHW_RETURN),
            Feature::CoolingLoad => Some(field::COIL_HEAT),
            Feature::ChwPumpPower => Some(field::PUMPS),
            Feature::ChillerPower => Some(field::CHILLERS),
            Feature::TotalPower => None,
            Feature::CrahFanPower => Some(field::FANS),
            Feature::ColdAisleTemp => Some(field::COLD_AISLE),
        }
    }
}

/// MAPE of one feature over paired observed and predicted states.
pub fn feature_mape(feature: Feature, observed: &[PlantState], predicted: &[PlantState]) -> Result<Mape> {
    let y: Vec<f64> = observed.iter().map(|s| feature.of(s)).collect();
    let p: Vec<f64> = predicted.iter().map(|s| feature.of(s)).collect();
    mape(&y, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_is_zero() {
        assert_eq!(mape(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().pct, 0.0);
    }

    #[test]
    fn worked_example() {
        let m = mape(&[100.0, 200.0], &[90.0, 210.0]).unwrap();
        assert!((m.pct - 7.5).abs() < 1e-12);
        assert_eq!(m.n, 2);
    }

    #[test]
    fn zero_observations_are_excluded_and_counted() {
        let m = mape(&[0.0, 100.0], &[5.0, 110.0]).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(m.n, 1);
        assert!((m.pct - 10.0).abs() < 1e-12);
        assert!(mape(&[0.0], &[1.0]).is_err());
        assert!(mape(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariant(
            pairs in prop::collection::vec((1.0f64..1e3, 1.0f64..1e3), 1..30),
            c in 1e-3f64..1e3,
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
            let pc: Vec<f64> = p.iter().map(|v| v * c).collect();
            let a = mape(&y, &p).unwrap().pct;
            let b = mape(&yc, &pc).unwrap().pct;
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}

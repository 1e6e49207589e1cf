//! Moist-air relations used by the SLA check and the moisture balance.
//!
//! Saturation pressure follows the Tetens form, valid to well under 1% over
//! the range a data hall sees.

use crate::error::{ensure_range, Result};

/// Standard atmospheric pressure, kPa.
pub const STANDARD_PRESSURE: f64 = 101.325;

/// Ratio of molecular weights of water vapour and dry air.
const EPSILON: f64 = 0.622;

/// Saturation vapour pressure over liquid water in kPa (Tetens).
pub fn saturation_pressure(temp_c: f64) -> f64 {
    0.6108 * (17.27 * temp_c / (temp_c + 237.3)).exp()
}

/// Humidity ratio (kg water / kg dry air) of saturated air.
pub fn saturation_humidity_ratio(temp_c: f64, pressure_kpa: f64) -> f64 {
    let p = saturation_pressure(temp_c);
    EPSILON * p / (pressure_kpa - p)
}

/// Partial pressure of water vapour for a given humidity ratio, kPa.
pub fn vapour_pressure(humidity_ratio: f64, pressure_kpa: f64) -> f64 {
    humidity_ratio * pressure_kpa / (EPSILON + humidity_ratio)
}

/// Relative humidity in percent, clipped to `[0, 100]`.
///
/// ```
/// use dlcf_core::plant::psychro::relative_humidity;
/// let rh = relative_humidity(25.0, 0.00988, 101.325).unwrap();
/// assert!((rh - 50.0).abs() < 0.5);
/// ```
pub fn relative_humidity(temp_c: f64, humidity_ratio: f64, pressure_kpa: f64) -> Result<f64> {
    ensure_range("temperature", temp_c, -20.0, 60.0)?;
    ensure_range("humidity_ratio", humidity_ratio, 0.0, f64::MAX)?;
    ensure_range("pressure", pressure_kpa, 1.0, 200.0)?;
    let rh = 100.0 * vapour_pressure(humidity_ratio, pressure_kpa) / saturation_pressure(temp_c);
    Ok(rh.clamp(0.0, 100.0))
}

/// Same as [`relative_humidity`] but saturating the temperature into the
/// valid range instead of failing. Used on predicted states where a wild
/// extrapolation must still produce a verdict.
pub(crate) fn relative_humidity_lenient(temp_c: f64, humidity_ratio: f64) -> f64 {
    let t = if temp_c.is_finite() {
        temp_c.clamp(-20.0, 60.0)
    } else {
        return f64::NAN;
    };
    let w = humidity_ratio.max(0.0);
    (100.0 * vapour_pressure(w, STANDARD_PRESSURE) / saturation_pressure(t)).clamp(0.0, 100.0)
}

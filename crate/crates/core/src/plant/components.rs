//! Closed-form component models: fans, pumps, chillers, tower.

use super::PlantConfig;
use crate::error::{ensure_range, Error, Result};

/// Specific heat of water, kJ/(kg·K).
pub const CP_WATER: f64 = 4.19;
/// Specific heat of air, kJ/(kg·K).
pub const CP_AIR: f64 = 1.006;

/// Reference point of the chiller performance curve.
pub const COP_REF_CHWS: f64 = 7.0;
pub const COP_REF_COND: f64 = 30.0;

/// Fan power from the cube affinity law with a parasitic floor.
///
/// ```
/// use dlcf_core::plant::components::fan_power;
/// assert_eq!(fan_power(0.5, 40.0, 0.02).unwrap(), 5.0);
/// ```
pub fn fan_power(ratio: f64, rated_kw: f64, floor: f64) -> Result<f64> {
    ensure_range("fan_ratio", ratio, 0.0, 1.0)?;
    Ok(rated_kw * floor.max(ratio.powi(3)))
}

/// Chilled-water pump power. The flow fraction may exceed 1 up to the pump's
/// 120% run-out point.
pub fn pump_power(flow_fraction: f64, rated_kw: f64, floor: f64) -> Result<f64> {
    ensure_range("chw_flow_fraction", flow_fraction, 0.0, 1.2)?;
    Ok(rated_kw * floor.max(flow_fraction.powi(3)))
}

/// Chilled-water flow as a fraction of design flow.
///
/// The coil's water-side temperature rise grows with the gap between return
/// air and chilled-water supply, so a colder supply moves the same heat with
/// less water. The result is clipped to the pump's `[0, 1.2]` envelope.
pub fn chw_flow_fraction(
    cooling_load_kw: f64,
    return_air_c: f64,
    chw_supply_c: f64,
    cfg: &PlantConfig,
) -> f64 {
    let delta_t = chw_delta_t(return_air_c, chw_supply_c, cfg);
    let design_flow = cfg.design_it_load / (CP_WATER * cfg.design_chw_delta_t);
    let flow = cooling_load_kw.max(0.0) / (CP_WATER * delta_t);
    (flow / design_flow).clamp(0.0, 1.2)
}

/// Water-side temperature rise across the CRAH coils, K.
pub fn chw_delta_t(return_air_c: f64, chw_supply_c: f64, cfg: &PlantConfig) -> f64 {
    (cfg.coil_water_effectiveness * (return_air_c - chw_supply_c - cfg.coil_water_offset))
        .max(cfg.chw_min_delta_t)
}

/// Chiller coefficient of performance before clipping.
pub fn raw_cop(chw_supply_c: f64, cond_water_c: f64, cfg: &PlantConfig) -> f64 {
    cfg.chiller_cop_ref + cfg.cop_chws_slope * (chw_supply_c - COP_REF_CHWS)
        - cfg.cop_cond_slope * (cond_water_c - COP_REF_COND)
}

/// Electrical chiller power for a cooling load.
///
/// ```
/// use dlcf_core::plant::{components::chiller_power, PlantConfig};
/// let cfg = PlantConfig::default();
/// assert!((chiller_power(550.0, 7.0, 30.0, &cfg).unwrap() - 100.0).abs() < 1e-9);
/// ```
pub fn chiller_power(
    cooling_load_kw: f64,
    chw_supply_c: f64,
    cond_water_c: f64,
    cfg: &PlantConfig,
) -> Result<f64> {
    ensure_range("cooling_load", cooling_load_kw, 0.0, f64::MAX)?;
    let cop = raw_cop(chw_supply_c, cond_water_c, cfg);
    if !(cop > 0.0) {
        return Err(Error::Config(format!(
            "chiller COP {cop:.3} is not positive at CHWS {chw_supply_c} °C, condenser {cond_water_c} °C"
        )));
    }
    Ok(cooling_load_kw / cop.max(1.0))
}

/// Cooling-tower fan power; fixed approach, so it only tracks rejected heat.
pub fn tower_power(heat_rejected_kw: f64, cfg: &PlantConfig) -> f64 {
    let design_rejection = cfg.design_it_load * (1.0 + 1.0 / cfg.chiller_cop_ref);
    cfg.rated_tower_fan_power * (heat_rejected_kw.max(0.0) / design_rejection).min(1.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_law_points() {
        assert_eq!(fan_power(1.0, 40.0, 0.02).unwrap(), 40.0);
        assert_eq!(fan_power(0.5, 40.0, 0.02).unwrap(), 5.0);
        assert_eq!(fan_power(0.0, 40.0, 0.02).unwrap(), 0.8);
        assert!(fan_power(1.01, 40.0, 0.02).is_err());
        assert!(fan_power(-0.1, 40.0, 0.02).is_err());
    }

    #[test]
    fn pump_law_points() {
        assert_eq!(pump_power(1.0, 30.0, 0.02).unwrap(), 30.0);
        assert!((pump_power(0.8, 30.0, 0.02).unwrap() - 15.36).abs() < 1e-12);
        assert!(pump_power(-0.1, 30.0, 0.02).is_err());
    }

    #[test]
    fn chiller_curve_points() {
        let cfg = PlantConfig::default();
        assert!((chiller_power(550.0, 7.0, 30.0, &cfg).unwrap() - 100.0).abs() < 1e-9);
        let warm = chiller_power(550.0, 9.0, 30.0, &cfg).unwrap();
        assert!((warm - 550.0 / 5.8).abs() < 1e-9);
        assert!((warm - 94.83).abs() < 0.01);
        assert!(
            chiller_power(550.0, 6.0, 30.0, &cfg).unwrap()
                > chiller_power(550.0, 7.0, 30.0, &cfg).unwrap()
        );
    }

    #[test]
    fn chiller_rejects_nonpositive_cop() {
        let cfg = PlantConfig {
            chiller_cop_ref: 0.5,
            ..PlantConfig::default()
        };
        assert!(matches!(
            chiller_power(100.0, 7.0, 40.0, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn colder_supply_needs_less_water() {
        let cfg = PlantConfig::default();
        let cold = chw_flow_fraction(500.0, 33.0, 6.0, &cfg);
        let warm = chw_flow_fraction(500.0, 33.0, 8.0, &cfg);
        assert!(cold < warm, "{cold} vs {warm}");
    }
}

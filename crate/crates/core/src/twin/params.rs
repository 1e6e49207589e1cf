use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::PlantConfig;

/// Calibratable plant parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    ChillerCopRef,
    CopChwsSlope,
    CopCondSlope,
    ColdAisleCapacity,
    HotAisleCapacity,
    TowerApproach,
    FanParasiticFloor,
    RatedFanPower,
    RatedChwPumpPower,
}

impl ParamName {
    pub const ALL: [ParamName; 9] = [
        ParamName::ChillerCopRef,
        ParamName::CopChwsSlope,
        ParamName::CopCondSlope,
        ParamName::ColdAisleCapacity,
        ParamName::HotAisleCapacity,
        ParamName::TowerApproach,
        ParamName::FanParasiticFloor,
        ParamName::RatedFanPower,
        ParamName::RatedChwPumpPower,
    ];

    pub fn read(&self, cfg: &PlantConfig) -> f64 {
        match self {
            ParamName::ChillerCopRef => cfg.chiller_cop_ref,
            ParamName::CopChwsSlope => cfg.cop_chws_slope,
            ParamName::CopCondSlope => cfg.cop_cond_slope,
            ParamName::ColdAisleCapacity => cfg.zone_heat_capacity.cold_aisle,
            ParamName::HotAisleCapacity => cfg.zone_heat_capacity.hot_aisle,
            ParamName::TowerApproach => cfg.tower_approach,
            ParamName::FanParasiticFloor => cfg.fan_parasitic_floor,
            ParamName::RatedFanPower => cfg.rated_fan_power,
            ParamName::RatedChwPumpPower => cfg.rated_chw_pump_power,
        }
    }

    pub fn write(&self, cfg: &mut PlantConfig, v: f64) {
        let slot = match self {
            ParamName::ChillerCopRef => &mut cfg.chiller_cop_ref,
            ParamName::CopChwsSlope => &mut cfg.cop_chws_slope,
            ParamName::CopCondSlope => &mut cfg.cop_cond_slope,
            ParamName::ColdAisleCapacity => &mut cfg.zone_heat_capacity.cold_aisle,
            ParamName::HotAisleCapacity => &mut cfg.zone_heat_capacity.hot_aisle,
            ParamName::TowerApproach => &mut cfg.tower_approach,
            ParamName::FanParasiticFloor => &mut cfg.fan_parasitic_floor,
            ParamName::RatedFanPower => &mut cfg.rated_fan_power,
            ParamName::RatedChwPumpPower => &mut cfg.rated_chw_pump_power,
        };
        *slot = v;
    }

    /// Search box around a nominal value.
    fn default_bounds(&self, nominal: f64) -> (f64, f64) {
        match self {
            ParamName::ChillerCopRef => (0.6 * nominal, 1.5 * nominal),
            ParamName::CopChwsSlope | ParamName::CopCondSlope => (0.0, 0.4),
            ParamName::TowerApproach => (1.0, 10.0),
            ParamName::FanParasiticFloor => (0.0, 0.1),
            ParamName::ColdAisleCapacity | ParamName::HotAisleCapacity => {
                (0.3 * nominal, 3.0 * nominal)
            }
            ParamName::RatedFanPower | ParamName::RatedChwPumpPower => {
                (0.5 * nominal, 2.0 * nominal)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedParam {
    pub name: ParamName,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// The twin's parameter vector θ with its search bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinParams {
    pub params: Vec<BoundedParam>,
}

impl TwinParams {
    /// Every calibratable parameter at its value in `cfg`, with default bounds.
    pub fn from_config(cfg: &PlantConfig) -> Self {
        Self::subset(cfg, &ParamName::ALL)
    }

    pub fn subset(cfg: &PlantConfig, names: &[ParamName]) -> Self {
        let params = names
            .iter()
            .map(|&name| {
                let value = name.read(cfg);
                let (lo, hi) = name.default_bounds(value);
                BoundedParam { name, value, lo, hi }
            })
            .collect();
        Self { params }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            if !(p.lo <= p.hi) || !(p.lo..=p.hi).contains(&p.value) {
                return Err(Error::OutOfRange {
                    what: "twin parameter",
                    value: p.value,
                    lo: p.lo,
                    hi: p.hi,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: ParamName) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    /// Sets a value, clamped to its bounds.
    pub fn set(&mut self, name: ParamName, value: f64) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownId(format!("{name:?}")))?;
        p.value = value.clamp(p.lo, p.hi);
        Ok(())
    }

    /// Overwrites the calibrated fields of `base`.
    pub fn apply(&self, base: &PlantConfig) -> PlantConfig {
        let mut cfg = base.clone();
        for p in &self.params {
            p.name.write(&mut cfg, p.value);
        }
        cfg
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Position of each value inside its box, in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| {
                if p.hi > p.lo {
                    (p.value - p.lo) / (p.hi - p.lo)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Inverse of [`Self::to_unit`]; coordinates are clamped into the box.
    pub fn with_unit(&self, u: &[f64]) -> Self {
        let params = self
            .params
            .iter()
            .zip(u)
            .map(|(p, &x)| BoundedParam {
                value: p.lo + x.clamp(0.0, 1.0) * (p.hi - p.lo),
                ..*p
            })
            .collect();
        Self { params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_round_trips_config() {
        let cfg = PlantConfig::default();
        let p = TwinParams::from_config(&cfg);
        assert_eq!(p.apply(&cfg), cfg);
        p.validate().unwrap();
    }

    #[test]
    fn unit_mapping_is_clamped() {
        let cfg = PlantConfig::default();
        let p = TwinParams::from_config(&cfg);
        let q = p.with_unit(&vec![2.0; p.len()]);
        for bp in &q.params {
            assert_eq!(bp.value, bp.hi);
        }
        let back = p.with_unit(&p.to_unit());
        for (a, b) in p.params.iter().zip(&back.params) {
            assert!((a.value - b.value).abs() < 1e-9 * (1.0 + a.value.abs()));
        }
    }

    #[test]
    fn set_clamps_and_rejects_unknown() {
        let cfg = PlantConfig::default();
        let mut p = TwinParams::subset(&cfg, &[ParamName::ChillerCopRef]);
        p.set(ParamName::ChillerCopRef, 100.0).unwrap();
        assert_eq!(p.get(ParamName::ChillerCopRef), Some(5.5 * 1.5));
        assert!(p.set(ParamName::TowerApproach, 3.0).is_err());
    }

    #[test]
    fn json_names_are_snake_case() {
        let p = TwinParams::subset(&PlantConfig::default(), &[ParamName::ChillerCopRef]);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"chiller_cop_ref\""), "{s}");
    }
}

//! First-principles model of the cooling plant and the data hall.
//!
//! The same code serves as the hidden "physical" plant (with perturbed
//! parameters) and as the physics core of the digital twin.

pub mod components;
mod dynamics;
pub mod psychro;
pub mod sensor;
pub mod trace;

pub use dynamics::{settle, step, Plant};
pub use sensor::{sense, NoiseConfig, SensorReading};
pub use trace::{ExoTrace, TraceConfig};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_range, Error, Result};

/// Heat capacities of the two air nodes, kJ/K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneCapacity {
    pub cold_aisle: f64,
    pub hot_aisle: f64,
}

/// Static description of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub n_crah: usize,
    /// Fan power of one CRAH at full speed, kW.
    pub rated_fan_power: f64,
    /// Supply airflow of one CRAH at full speed, kg/s.
    pub rated_airflow: f64,
    pub rated_chw_pump_power: f64,
    pub rated_cond_pump_power: f64,
    pub rated_tower_fan_power: f64,
    pub chiller_cop_ref: f64,
    pub cop_chws_slope: f64,
    pub cop_cond_slope: f64,
    /// Condenser water leaves the tower this far above the outdoor wet bulb, K.
    pub tower_approach: f64,
    pub zone_heat_capacity: ZoneCapacity,
    pub design_it_load: f64,
    pub design_chw_delta_t: f64,
    pub fan_parasitic_floor: f64,
    /// Control interval, s.
    pub timestep: f64,
    /// Air temperature rise across the servers, K.
    pub server_delta_t: f64,
    /// Hot-air leakage into the cold aisle when supply matches server demand.
    pub recirculation_leak: f64,
    /// Extra recirculation per unit of airflow deficit.
    pub recirculation_gain: f64,
    pub recirculation_max: f64,
    pub coil_water_effectiveness: f64,
    pub coil_water_offset: f64,
    pub chw_min_delta_t: f64,
    /// Coils cannot deliver air colder than CHWS plus this approach, K.
    pub coil_min_approach: f64,
    /// Apparatus dew point sits this far above CHWS, K.
    pub apparatus_offset: f64,
    /// Fraction of IT load released as moisture.
    pub latent_fraction: f64,
    /// Dry-air mass of the hall, kg.
    pub air_mass: f64,
    pub pressure: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            n_crah: 8,
            rated_fan_power: 3.0,
            rated_airflow: 7.0,
            rated_chw_pump_power: 30.0,
            rated_cond_pump_power: 15.0,
            rated_tower_fan_power: 10.0,
            chiller_cop_ref: 5.5,
            cop_chws_slope: 0.15,
            cop_cond_slope: 0.12,
            tower_approach: 4.0,
            zone_heat_capacity: ZoneCapacity {
                cold_aisle: 8_000.0,
                hot_aisle: 30_000.0,
            },
            design_it_load: 600.0,
            design_chw_delta_t: 6.6,
            fan_parasitic_floor: 0.02,
            timestep: 900.0,
            server_delta_t: 12.0,
            recirculation_leak: 0.3,
            recirculation_gain: 2.0,
            recirculation_max: 0.95,
            coil_water_effectiveness: 0.4,
            coil_water_offset: 12.0,
            chw_min_delta_t: 1.0,
            coil_min_approach: 3.0,
            apparatus_offset: 3.0,
            latent_fraction: 0.02,
            air_mass: 5_000.0,
            pressure: psychro::STANDARD_PRESSURE,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_crah == 0 {
            return cfg_err("n_crah must be positive");
        }
        let ratings = [
            ("rated_fan_power", self.rated_fan_power),
            ("rated_airflow", self.rated_airflow),
            ("rated_chw_pump_power", self.rated_chw_pump_power),
            ("rated_cond_pump_power", self.rated_cond_pump_power),
            ("rated_tower_fan_power", self.rated_tower_fan_power),
            ("chiller_cop_ref", self.chiller_cop_ref),
            ("cold aisle capacity", self.zone_heat_capacity.cold_aisle),
            ("hot aisle capacity", self.zone_heat_capacity.hot_aisle),
            ("design_it_load", self.design_it_load),
            ("design_chw_delta_t", self.design_chw_delta_t),
            ("timestep", self.timestep),
            ("server_delta_t", self.server_delta_t),
            ("coil_water_effectiveness", self.coil_water_effectiveness),
            ("chw_min_delta_t", self.chw_min_delta_t),
            ("air_mass", self.air_mass),
            ("pressure", self.pressure),
        ];
        for (name, v) in ratings {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=0.1).contains(&self.fan_parasitic_floor) {
            return cfg_err("fan_parasitic_floor must lie in [0, 0.1]");
        }
        if !(self.tower_approach > 0.0 && self.tower_approach <= 10.0) {
            return cfg_err("tower_approach must lie in (0, 10] K");
        }
        if !(0.0..=1.0).contains(&self.recirculation_max) || self.recirculation_leak < 0.0 {
            return cfg_err("recirculation parameters out of range");
        }
        Ok(())
    }

    /// Design airflow demanded by the servers at a given IT load, kg/s.
    pub fn server_airflow(&self, it_load: f64) -> f64 {
        it_load.max(0.0) / (components::CP_AIR * self.server_delta_t)
    }
}

/// Electrical power drawn by each component group, kW.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub crah_fans: f64,
    pub chw_pumps: f64,
    pub chillers: f64,
    pub cond_pumps: f64,
    pub tower: f64,
}

impl PowerBreakdown {
    pub fn total(&self) -> f64 {
        self.crah_fans + self.chw_pumps + self.chillers + self.cond_pumps + self.tower
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.crah_fans,
            self.chw_pumps,
            self.chillers,
            self.cond_pumps,
            self.tower,
        ]
    }
}

/// Number of entries in [`PlantState::to_vec`].
pub const STATE_DIM: usize = 12;

/// Field names in [`PlantState::to_vec`] order.
pub const STATE_FIELDS: [&str; STATE_DIM] = [
    "cold_aisle_temp",
    "return_air_temp",
    "zone_humidity_ratio",
    "chw_supply_temp",
    "chw_return_temp",
    "cond_water_temp",
    "coil_heat",
    "crah_fans",
    "chw_pumps",
    "chillers",
    "cond_pumps",
    "tower",
];

/// Index helpers for [`PlantState::to_vec`].
pub mod field {
    pub const COLD_AISLE: usize = 0;
    pub const RETURN_AIR: usize = 1;
    pub const HUMIDITY: usize = 2;
    pub const CHW_SUPPLY: usize = 3;
    pub const CHW_RETURN: usize = 4;
    pub const COND_WATER: usize = 5;
    pub const COIL_HEAT: usize = 6;
    pub const FANS: usize = 7;
    pub const PUMPS: usize = 8;
    pub const CHILLERS: usize = 9;
    pub const COND_PUMPS: usize = 10;
    pub const TOWER: usize = 11;
    pub const POWERS: std::ops::Range<usize> = 7..12;
}

/// Thermodynamic state of hall and plant at one control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// IT inlet (cold aisle) temperature, °C.
    pub cold_aisle_temp: f64,
    pub return_air_temp: f64,
    pub zone_humidity_ratio: f64,
    pub chw_supply_temp: f64,
    pub chw_return_temp: f64,
    pub cond_water_temp: f64,
    /// Mean heat removed by the CRAH coils over the last step, kW.
    pub coil_heat: f64,
    pub power: PowerBreakdown,
    pub sim_time: f64,
    /// Absorbing sentinel used by the pessimistic twin.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub halted: bool,
}

impl PlantState {
    /// Quiescent hall at a uniform temperature with all equipment idle.
    pub fn at_rest(temp_c: f64, humidity_ratio: f64) -> Self {
        Self {
            cold_aisle_temp: temp_c,
            return_air_temp: temp_c,
            zone_humidity_ratio: humidity_ratio,
            chw_supply_temp: 7.0,
            chw_return_temp: 7.0,
            cond_water_temp: 30.0,
            coil_heat: 0.0,
            power: PowerBreakdown::default(),
            sim_time: 0.0,
            halted: false,
        }
    }

    /// The absorbing HALT sentinel: every physical field zero.
    pub fn halt() -> Self {
        Self {
            cold_aisle_temp: 0.0,
            return_air_temp: 0.0,
            zone_humidity_ratio: 0.0,
            chw_supply_temp: 0.0,
            chw_return_temp: 0.0,
            cond_water_temp: 0.0,
            coil_heat: 0.0,
            power: PowerBreakdown::default(),
            sim_time: 0.0,
            halted: true,
        }
    }

    pub fn total_power(&self) -> f64 {
        self.power.total()
    }

    /// Relative humidity at the IT inlet, percent.
    pub fn inlet_rh(&self) -> f64 {
        psychro::relative_humidity_lenient(self.cold_aisle_temp, self.zone_humidity_ratio)
    }

    pub fn to_vec(&self) -> [f64; STATE_DIM] {
        let p = self.power;
        [
            self.cold_aisle_temp,
            self.return_air_temp,
            self.zone_humidity_ratio,
            self.chw_supply_temp,
            self.chw_return_temp,
            self.cond_water_temp,
            self.coil_heat,
            p.crah_fans,
            p.chw_pumps,
            p.chillers,
            p.cond_pumps,
            p.tower,
        ]
    }

    /// Rebuilds a state from a vector, restoring the physical invariants a
    /// learned correction may have broken (non-negative humidity and powers,
    /// return water no colder than supply).
    pub fn from_vec(v: &[f64; STATE_DIM], sim_time: f64) -> Self {
        let chw_supply_temp = v[field::CHW_SUPPLY];
        Self {
            cold_aisle_temp: v[field::COLD_AISLE],
            return_air_temp: v[field::RETURN_AIR],
            zone_humidity_ratio: v[field::HUMIDITY].max(0.0),
            chw_supply_temp,
            chw_return_temp: v[field::CHW_RETURN].max(chw_supply_temp),
            cond_water_temp: v[field::COND_WATER],
            coil_heat: v[field::COIL_HEAT],
            power: PowerBreakdown {
                crah_fans: v[field::FANS].max(0.0),
                chw_pumps: v[field::PUMPS].max(0.0),
                chillers: v[field::CHILLERS].max(0.0),
                cond_pumps: v[field::COND_PUMPS].max(0.0),
                tower: v[field::TOWER].max(0.0),
            },
            sim_time,
            halted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in STATE_FIELDS.iter().zip(self.to_vec()) {
            ensure_finite(name, v)?;
        }
        ensure_finite("sim_time", self.sim_time)?;
        ensure_range("zone_humidity_ratio", self.zone_humidity_ratio, 0.0, 1.0)?;
        for v in self.power.as_array() {
            ensure_range("power", v, 0.0, f64::MAX)?;
        }
        Ok(())
    }
}

/// Setpoints sent to the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub chw_supply_setpoint: f64,
    /// Supply-air temperature setpoint per CRAH, °C.
    pub crah_sat_setpoint: Vec<f64>,
    /// Fan speed ratio per CRAH.
    pub crah_fan_ratio: Vec<f64>,
}

impl ControlAction {
    /// Same setpoints on every CRAH.
    pub fn uniform(chws: f64, sat: f64, fan: f64, n_crah: usize) -> Self {
        Self {
            chw_supply_setpoint: chws,
            crah_sat_setpoint: vec![sat; n_crah],
            crah_fan_ratio: vec![fan; n_crah],
        }
    }

    pub fn n_crah(&self) -> usize {
        self.crah_fan_ratio.len()
    }

    pub fn mean_sat(&self) -> f64 {
        mean(&self.crah_sat_setpoint)
    }

    pub fn mean_fan(&self) -> f64 {
        mean(&self.crah_fan_ratio)
    }

    /// Flattened as `[CHWS, SAT.., fan..]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + 2 * self.n_crah());
        v.push(self.chw_supply_setpoint);
        v.extend_from_slice(&self.crah_sat_setpoint);
        v.extend_from_slice(&self.crah_fan_ratio);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() < 3 || (v.len() - 1) % 2 != 0 {
            return Err(Error::Dimension {
                expected: 3,
                got: v.len(),
            });
        }
        let n = (v.len() - 1) / 2;
        Ok(Self {
            chw_supply_setpoint: v[0],
            crah_sat_setpoint: v[1..1 + n].to_vec(),
            crah_fan_ratio: v[1 + n..].to_vec(),
        })
    }

    pub fn validate(&self, n_crah: usize) -> Result<()> {
        if self.crah_sat_setpoint.len() != n_crah {
            return Err(Error::Dimension {
                expected: n_crah,
                got: self.crah_sat_setpoint.len(),
            });
        }
        if self.crah_fan_ratio.len() != n_crah {
            return Err(Error::Dimension {
                expected: n_crah,
                got: self.crah_fan_ratio.len(),
            });
        }
        ensure_finite("chw_supply_setpoint", self.chw_supply_setpoint)?;
        for &s in &self.crah_sat_setpoint {
            ensure_finite("crah_sat_setpoint", s)?;
        }
        for &f in &self.crah_fan_ratio {
            ensure_range("crah_fan_ratio", f, 0.0, 1.0)?;
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Disturbances the controller cannot influence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInput {
    pub it_load: f64,
    pub outdoor_wetbulb: f64,
}

impl ExogenousInput {
    pub fn validate(&self) -> Result<()> {
        ensure_range("it_load", self.it_load, 0.0, f64::MAX)?;
        ensure_finite("outdoor_wetbulb", self.outdoor_wetbulb)
    }
}

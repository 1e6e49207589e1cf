use super::components::{self, CP_AIR};
use super::psychro;
use super::{ControlAction, ExogenousInput, PlantConfig, PlantState, PowerBreakdown};
use crate::error::Result;

/// Latent heat of vaporisation, kJ/kg.
const H_FG: f64 = 2450.0;

/// Advances the plant by one control interval.
///
/// Two lumped air nodes: the hot aisle / return plenum, heated by the IT load
/// and cooled by the CRAH coils, and the cold aisle, which mixes supply air
/// with recirculated hot air. Both relax exponentially toward their
/// quasi-steady targets, which keeps the update stable for any timestep.
/// The coil heat reported in the new state is exactly the IT heat minus the
/// change in stored hot-aisle energy over the step.
pub fn step(
    state: &PlantState,
    action: &ControlAction,
    exo: &ExogenousInput,
    cfg: &PlantConfig,
) -> Result<PlantState> {
    state.validate()?;
    action.validate(cfg.n_crah)?;
    exo.validate()?;

    let dt = cfg.timestep;
    let q_it = exo.it_load;
    let chws = action.chw_supply_setpoint;

    // Supply air, flow weighted across units.
    let mut airflow = 0.0;
    let mut sat_weighted = 0.0;
    let mut fan_kw = 0.0;
    for (&sat, &ratio) in action.crah_sat_setpoint.iter().zip(&action.crah_fan_ratio) {
        let m = cfg.rated_airflow * ratio;
        let sat = sat.max(chws + cfg.coil_min_approach);
        airflow += m;
        sat_weighted += m * sat;
        fan_kw += components::fan_power(ratio, cfg.rated_fan_power, cfg.fan_parasitic_floor)?;
    }
    let supply_temp = if airflow > 0.0 {
        sat_weighted / airflow
    } else {
        action.mean_sat().max(chws + cfg.coil_min_approach)
    };

    // Hot aisle / return node.
    let c_hot = cfg.zone_heat_capacity.hot_aisle;
    let t_ret = state.return_air_temp;
    let t_ret_next = if airflow > 0.0 {
        let conductance = airflow * CP_AIR;
        let target = supply_temp + q_it / conductance;
        let decay = (-dt * conductance / c_hot).exp();
        target + (t_ret - target) * decay
    } else {
        t_ret + q_it * dt / c_hot
    };
    let coil_heat = q_it - c_hot * (t_ret_next - t_ret) / dt;

    // Cold aisle: supply air contaminated by recirculated return air.
    let server_flow = cfg.server_airflow(q_it);
    let recirculation = if server_flow <= 0.0 {
        0.0
    } else if airflow <= 0.0 {
        cfg.recirculation_max
    } else {
        let leak = cfg.recirculation_leak * server_flow / airflow;
        let deficit = cfg.recirculation_gain * (1.0 - airflow / server_flow).max(0.0);
        (leak + deficit).min(cfg.recirculation_max)
    };
    let inlet_target = supply_temp + recirculation * (t_ret_next - supply_temp);
    let through_flow = airflow.max(server_flow);
    let t_cold_next = if through_flow > 0.0 {
        let decay = (-dt * through_flow * CP_AIR / cfg.zone_heat_capacity.cold_aisle).exp();
        inlet_target + (state.cold_aisle_temp - inlet_target) * decay
    } else {
        state.cold_aisle_temp
    };

    // Moisture: IT latent gain, condensation on a wet coil.
    let latent = cfg.latent_fraction * q_it / H_FG;
    let w = state.zone_humidity_ratio;
    let w_apparatus =
        psychro::saturation_humidity_ratio(chws + cfg.apparatus_offset, cfg.pressure);
    let w_next = if airflow > 0.0 {
        let wet_steady = w_apparatus + latent / airflow;
        if w > w_apparatus {
            let decay = (-dt * airflow / cfg.air_mass).exp();
            wet_steady + (w - wet_steady) * decay
        } else {
            (w + latent * dt / cfg.air_mass).min(wet_steady.max(w))
        }
    } else {
        w + latent * dt / cfg.air_mass
    };

    // Water side.
    let chiller_load = coil_heat.max(0.0);
    let flow_fraction = components::chw_flow_fraction(chiller_load, t_ret_next, chws, cfg);
    let chw_return = if flow_fraction > 0.0 {
        let design_flow = cfg.design_it_load / (components::CP_WATER * cfg.design_chw_delta_t);
        chws + chiller_load / (components::CP_WATER * flow_fraction * design_flow)
    } else {
        chws
    };
    let pump_kw = components::pump_power(
        flow_fraction,
        cfg.rated_chw_pump_power,
        cfg.fan_parasitic_floor,
    )?;
    let cond_water = exo.outdoor_wetbulb + cfg.tower_approach;
    let chiller_kw = components::chiller_power(chiller_load, chws, cond_water, cfg)?;
    let cond_pump_kw = if chiller_load > 0.0 {
        cfg.rated_cond_pump_power
    } else {
        0.0
    };
    let tower_kw = components::tower_power(chiller_load + chiller_kw, cfg);

    Ok(PlantState {
        cold_aisle_temp: t_cold_next,
        return_air_temp: t_ret_next,
        zone_humidity_ratio: w_next.max(0.0),
        chw_supply_temp: chws,
        chw_return_temp: chw_return,
        cond_water_temp: cond_water,
        coil_heat,
        power: PowerBreakdown {
            crah_fans: fan_kw,
            chw_pumps: pump_kw,
            chillers: chiller_kw,
            cond_pumps: cond_pump_kw,
            tower: tower_kw,
        },
        sim_time: state.sim_time + dt,
        halted: false,
    })
}

/// Runs `steps` intervals under a fixed action and disturbance, starting
/// from `state`. Used to produce a warmed-up initial condition.
pub fn settle(
    mut state: PlantState,
    action: &ControlAction,
    exo: &ExogenousInput,
    cfg: &PlantConfig,
    steps: usize,
) -> Result<PlantState> {
    let t0 = state.sim_time;
    for _ in 0..steps {
        state = step(&state, action, exo, cfg)?;
    }
    state.sim_time = t0;
    Ok(state)
}

/// The ground-truth plant: a configuration (possibly unknown to the twin)
/// plus its evolving state. Owned by a single writer.
#[derive(Debug, Clone)]
pub struct Plant {
    pub cfg: PlantConfig,
    pub state: PlantState,
}

impl Plant {
    pub fn new(cfg: PlantConfig, state: PlantState) -> Result<Self> {
        cfg.validate()?;
        state.validate()?;
        Ok(Self { cfg, state })
    }

    pub fn advance(&mut self, action: &ControlAction, exo: &ExogenousInput) -> Result<&PlantState> {
        self.state = step(&self.state, action, exo, &self.cfg)?;
        Ok(&self.state)
    }
}

use std::sync::Arc;

use proptest::prelude::*;

use super::mlp::Mlp;
use super::residual::{Scaler, ENSEMBLE_SCHEMA_VERSION, INPUT_DIM};
use super::*;
use crate::mdp::MdpSpec;
use crate::plant::{
    field, ControlAction, ExoTrace, ExogenousInput, NoiseConfig, PlantConfig, PlantState,
    PowerBreakdown, TraceConfig, STATE_DIM,
};
use crate::safety::{ActionBounds, Interval, Scope, SlaEnvelope};

fn exo() -> ExogenousInput {
    ExogenousInput {
        it_load: 540.0,
        outdoor_wetbulb: 26.0,
    }
}

fn warm_state(cfg: &PlantConfig) -> PlantState {
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    crate::plant::settle(PlantState::at_rest(24.0, 0.008), &a, &exo(), cfg, 40).unwrap()
}

fn trace(steps: usize, seed: u64) -> ExoTrace {
    let tc = TraceConfig {
        seed,
        ..TraceConfig::default()
    };
    ExoTrace::synthetic(&tc, 900.0, steps)
}

fn explore_data(cfg: &PlantConfig, steps: usize, seed: u64, fan: Interval) -> Dataset {
    let bounds = ActionBounds::uniform(cfg.n_crah, Interval::new(6.5, 8.0), Interval::new(20.0, 23.0), fan);
    dataset::explore(cfg, &trace(steps, seed), &bounds, &NoiseConfig::noiseless(), seed).unwrap()
}

fn small_train(members: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        members,
        epochs,
        ..TrainConfig::default()
    }
}

/// Maps every transition's `s_next` through `f`.
fn with_targets(data: &Dataset, f: impl Fn(&Transition, &mut PlantState)) -> Dataset {
    let mut d = data.clone();
    for tr in &mut d.transitions {
        let mut s = tr.s_next.clone();
        f(tr, &mut s);
        tr.s_next = s;
    }
    d
}

/// An ensemble whose members add fixed corrections, with unit scalers.
fn constant_ensemble(biases: &[[f64; STATE_DIM]]) -> ResidualEnsemble {
    let unit = |dim: usize| Scaler {
        mean: vec![0.0; dim],
        std: vec![1.0; dim],
    };
    ResidualEnsemble {
        schema_version: ENSEMBLE_SCHEMA_VERSION,
        members: biases.iter().map(|b| Mlp::constant(INPUT_DIM, 4, b)).collect(),
        inputs: unit(INPUT_DIM),
        targets: unit(STATE_DIM),
        states: unit(STATE_DIM),
        final_loss: vec![0.0; biases.len()],
        loss_curves: vec![Vec::new(); biases.len()],
        degenerate: false,
    }
}

#[test]
fn zero_residual_prediction_equals_physics() {
    let cfg = PlantConfig::default();
    let twin = Twin::from_config(cfg.clone())
        .unwrap()
        .with_ensemble(Arc::new(constant_ensemble(&[[0.0; STATE_DIM]; 3])))
        .unwrap();
    let s = warm_state(&cfg);
    let a = ControlAction::uniform(7.5, 21.0, 0.7, cfg.n_crah);
    let p = twin.predict(&s, &a, &exo()).unwrap();
    let phys = crate::plant::step(&s, &a, &exo(), &cfg).unwrap();
    assert_eq!(p.mean, phys);
    assert!(p.members.iter().all(|m| *m == phys));
    assert_eq!(p.disagreement, 0.0);
}

#[test]
fn targets_equal_to_physics_give_zero_residual() {
    let cfg = PlantConfig::default();
    let data = explore_data(&cfg, 80, 1, Interval::new(0.5, 1.0));
    let ens = fit_residual(&data, &cfg, &PimlConfig::default(), &small_train(2, 5)).unwrap();
    assert!(ens.degenerate);
    assert!(ens.final_loss.iter().all(|&l| l == 0.0));
    for tr in &data.transitions {
        for r in ens.corrections(&tr.s, &tr.a, &tr.exo) {
            assert!(r.iter().all(|v| v.abs() < 1e-6), "{r:?}");
        }
    }
}

#[test]
fn fit_rejects_small_data_and_single_member() {
    let cfg = PlantConfig::default();
    let data = explore_data(&cfg, 60, 2, Interval::new(0.5, 1.0));
    let (small, _) = data.split_at(residual::MIN_TRANSITIONS - 1);
    assert!(fit_residual(&small, &cfg, &PimlConfig::default(), &small_train(2, 1)).is_err());
    assert!(fit_residual(&data, &cfg, &PimlConfig::default(), &small_train(1, 1)).is_err());
}

#[test]
fn recovers_constant_temperature_bias() {
    let cfg = PlantConfig::default();
    let raw = explore_data(&cfg, 1200, 3, Interval::new(0.5, 1.0));
    let biased = with_targets(&raw, |_, s| s.cold_aisle_temp += 0.5);
    let (train, test) = biased.split_at(1000);
    let ens = fit_residual(&train, &cfg, &PimlConfig::data_only(), &small_train(3, 60)).unwrap();
    let twin = Twin::from_config(cfg).unwrap().with_ensemble(Arc::new(ens)).unwrap();
    let mut worst = 0.0f64;
    for tr in &test.transitions {
        let p = twin.predict(&tr.s, &tr.a, &tr.exo).unwrap();
        worst = worst.max((p.mean.cold_aisle_temp - tr.s_next.cold_aisle_temp).abs());
    }
    assert!(worst < 0.1, "worst one-step error {worst}");
}

#[test]
fn learns_linear_correction_to_least_squares_accuracy() {
    let cfg = PlantConfig::default();
    let raw = explore_data(&cfg, 600, 4, Interval::new(0.5, 1.0));
    let shift = |tr: &Transition| 0.01 * (tr.exo.it_load - 535.0) + 0.8 * (tr.a.mean_fan() - 0.75);
    let data = with_targets(&raw, |tr, s| s.return_air_temp += shift(tr));
    let ens = fit_residual(&data, &cfg, &PimlConfig::data_only(), &small_train(2, 500)).unwrap();
    let targets: Vec<f64> = data
        .transitions
        .iter()
        .map(|tr| {
            let phys = crate::plant::step(&tr.s, &tr.a, &tr.exo, &cfg).unwrap();
            tr.s_next.return_air_temp - phys.return_air_temp
        })
        .collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / targets.len() as f64;
    for m in 0..ens.k() {
        let mse = data
            .transitions
            .iter()
            .zip(&targets)
            .map(|(tr, t)| (ens.corrections(&tr.s, &tr.a, &tr.exo)[m][field::RETURN_AIR] - t).powi(2))
            .sum::<f64>()
            / targets.len() as f64;
        assert!(mse < 1e-3 * var, "member {m}: mse {mse} var {var}");
    }
}

#[test]
fn recorded_loss_is_nonincreasing() {
    let cfg = PlantConfig::default();
    let raw = explore_data(&cfg, 120, 5, Interval::new(0.5, 1.0));
    let data = with_targets(&raw, |tr, s| s.cold_aisle_temp += 0.002 * (tr.exo.it_load - 535.0));
    let ens = fit_residual(&data, &cfg, &PimlConfig::default(), &small_train(2, 40)).unwrap();
    for curve in &ens.loss_curves {
        assert_eq!(curve.len(), 40);
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    }
    assert_eq!(ens.final_loss[0], *ens.loss_curves[0].last().unwrap());
}

#[test]
fn physics_penalty_reduces_energy_balance_violation() {
    let cfg = PlantConfig::default();
    let raw = explore_data(&cfg, 150, 6, Interval::new(0.5, 1.0));
    let data = with_targets(&raw, |tr, s| s.coil_heat += 20.0 + 0.05 * (tr.exo.it_load - 535.0));
    let plain = fit_residual(&data, &cfg, &PimlConfig::data_only(), &small_train(2, 60)).unwrap();
    let piml = PimlConfig {
        lambda: 1e3,
        ..PimlConfig::default()
    };
    let phys = fit_residual(&data, &cfg, &piml, &small_train(2, 60)).unwrap();
    let v_plain = plain.energy_violation(&data, &cfg);
    let v_phys = phys.energy_violation(&data, &cfg);
    assert!(v_phys <= v_plain, "{v_phys} > {v_plain}");
}

#[test]
fn out_of_distribution_actions_spread_members() {
    let cfg = PlantConfig::default();
    let raw = explore_data(&cfg, 500, 7, Interval::new(0.6, 0.9));
    let data = with_targets(&raw, |tr, s| {
        s.cold_aisle_temp += 0.3 * (tr.a.mean_fan() - 0.75) + 0.001 * (tr.exo.it_load - 535.0)
    });
    let (train, held) = data.split_at(400);
    let ens = fit_residual(&train, &cfg, &PimlConfig::data_only(), &small_train(4, 60)).unwrap();
    let twin = Twin::from_config(cfg.clone()).unwrap().with_ensemble(Arc::new(ens)).unwrap();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let ind: Vec<f64> = held
        .transitions
        .iter()
        .map(|t| twin.disagreement(&t.s, &t.a, &t.exo).unwrap())
        .collect();
    let ood: Vec<f64> = held
        .transitions
        .iter()
        .map(|t| {
            let mut a = t.a.clone();
            a.crah_fan_ratio.iter_mut().for_each(|f| *f = 0.3);
            twin.disagreement(&t.s, &a, &t.exo).unwrap()
        })
        .collect();
    assert!(median(ood.clone()) > median(ind.clone()), "ood {} ind {}", median(ood), median(ind));
}

#[test]
fn ensemble_json_round_trip() {
    let ens = constant_ensemble(&[[0.5; STATE_DIM], [0.0; STATE_DIM]]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ens.json");
    ens.save(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("\"schema_version\":1"));
    assert_eq!(ResidualEnsemble::load(&p).unwrap(), ens);
}

#[test]
fn disagreement_of_identical_members_is_zero() {
    let cfg = PlantConfig::default();
    let twin = Twin::from_config(cfg.clone())
        .unwrap()
        .with_ensemble(Arc::new(constant_ensemble(&[[0.3; STATE_DIM]; 4])))
        .unwrap();
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    assert_eq!(twin.disagreement(&warm_state(&cfg), &a, &exo()).unwrap(), 0.0);
}

#[test]
fn disagreement_of_one_field_offset_is_that_offset() {
    let cfg = PlantConfig::default();
    let mut shifted = [0.0; STATE_DIM];
    shifted[field::RETURN_AIR] = 0.75;
    let mut ens = constant_ensemble(&[[0.0; STATE_DIM], shifted]);
    ens.states.std[field::RETURN_AIR] = 0.5;
    let twin = Twin::from_config(cfg.clone()).unwrap().with_ensemble(Arc::new(ens)).unwrap();
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    let d = twin.disagreement(&warm_state(&cfg), &a, &exo()).unwrap();
    assert!((d - 1.5).abs() < 1e-12, "{d}");
}

/// A model with fixed power draw and a fixed inlet temperature.
struct Flat {
    total_kw: f64,
    inlet_c: f64,
}

impl TwinModel for Flat {
    fn transition(&self, s: &PlantState, _: &ControlAction, _: &ExogenousInput) -> crate::Result<ModelStep> {
        let mut n = PlantState::at_rest(self.inlet_c, 0.009);
        n.power = PowerBreakdown {
            chillers: self.total_kw,
            ..PowerBreakdown::default()
        };
        n.sim_time = s.sim_time + 900.0;
        Ok(ModelStep {
            members: vec![n.clone()],
            next: n,
        })
    }
}

#[test]
fn empty_horizon_rollout() {
    let m = Flat {
        total_kw: 100.0,
        inlet_c: 24.0,
    };
    let a = ControlAction::uniform(7.0, 22.0, 0.85, 2);
    let t = rollout(&m, &PlantState::at_rest(24.0, 0.008), &mut Hold(a), &[], 0, &MdpSpec::default(), &SlaEnvelope::default());
    assert!(t.is_empty());
    assert_eq!(t.energy_kwh, 0.0);
    assert_eq!(t.ret, 0.0);
}

#[test]
fn constant_power_energy_and_violation_flags() {
    let a = ControlAction::uniform(7.0, 22.0, 0.85, 2);
    let spec = MdpSpec::default();
    let sla = SlaEnvelope::default();
    let s0 = PlantState::at_rest(24.0, 0.008);
    let ok = Flat {
        total_kw: 100.0,
        inlet_c: 24.0,
    };
    let t = rollout(&ok, &s0, &mut Hold(a.clone()), &[exo(); 4], 4, &spec, &sla);
    assert_eq!(t.len(), 4);
    assert!((t.energy_kwh - 100.0).abs() < 1e-12);
    assert!(t.all_compliant());
    let rewards = t.rewards();
    assert!((t.ret - crate::mdp::discounted_return(&rewards, spec.gamma)).abs() < 1e-12);

    let hot = Flat {
        total_kw: 100.0,
        inlet_c: 27.5,
    };
    let t = rollout(&hot, &s0, &mut Hold(a), &[exo(); 2], 2, &spec, &sla);
    assert!(t.steps.iter().all(|s| !s.sla_ok));
    assert!((t.steps[0].constraint - 0.5).abs() < 1e-9);
}

#[test]
fn failing_step_truncates_with_flag() {
    let cfg = PlantConfig::default();
    let twin = Twin::from_config(cfg.clone()).unwrap();
    let good = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    let mut bad = good.clone();
    bad.crah_fan_ratio[0] = f64::NAN;
    let t = rollout(
        &twin,
        &warm_state(&cfg),
        &mut Sequence(vec![good, bad]),
        &[exo(); 3],
        3,
        &MdpSpec::default(),
        &SlaEnvelope::default(),
    );
    assert_eq!(t.len(), 1);
    assert!(t.failure.is_some());
    assert!(!t.all_compliant());
}

fn wild_twin(cfg: &PlantConfig) -> Twin {
    let mut far = [0.0; STATE_DIM];
    far[field::COLD_AISLE] = 10.0;
    Twin::from_config(cfg.clone())
        .unwrap()
        .with_ensemble(Arc::new(constant_ensemble(&[[0.0; STATE_DIM], far])))
        .unwrap()
}

#[test]
fn halt_on_first_step_returns_absorbing_value() {
    let cfg = PlantConfig::default();
    let p = pessimize(
        wild_twin(&cfg),
        UncertaintyConfig {
            disagreement_threshold: 1.0,
            halt_penalty: 10.0,
        },
    )
    .unwrap();
    let spec = MdpSpec {
        gamma: 0.9,
        ..MdpSpec::default()
    };
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    let t = rollout(&p, &warm_state(&cfg), &mut Hold(a), &[exo(); 3], 3, &spec, &SlaEnvelope::default());
    assert_eq!(t.halted_at, Some(0));
    // -10 / (1 - 0.9) = -100 up to the rounding of 0.9 in binary.
    assert!((t.ret + 100.0).abs() <= 4.0 * f64::EPSILON * 100.0, "{}", t.ret);
}

#[test]
fn halt_is_absorbing() {
    let cfg = PlantConfig::default();
    let p = pessimize(wild_twin(&cfg), UncertaintyConfig::default()).unwrap();
    let h = PlantState::halt();
    for fan in [0.3, 0.6, 1.0] {
        let a = ControlAction::uniform(6.0, 18.0, fan, cfg.n_crah);
        assert!(p.transition(&h, &a, &exo()).unwrap().next.halted);
    }
}

#[test]
fn infinite_threshold_disables_pessimism() {
    let cfg = PlantConfig::default();
    let twin = wild_twin(&cfg);
    let p = pessimize(
        twin.clone(),
        UncertaintyConfig {
            disagreement_threshold: f64::INFINITY,
            halt_penalty: 10.0,
        },
    )
    .unwrap();
    let spec = MdpSpec::default();
    let a = ControlAction::uniform(7.0, 22.0, 0.85, cfg.n_crah);
    let s0 = warm_state(&cfg);
    let sla = SlaEnvelope::default();
    let plain = rollout(&twin, &s0, &mut Hold(a.clone()), &[exo(); 3], 3, &spec, &sla);
    let pess = rollout(&p, &s0, &mut Hold(a), &[exo(); 3], 3, &spec, &sla);
    assert_eq!(plain, pess);
}

#[test]
fn threshold_quantile_matches_sorted_values() {
    let cfg = PlantConfig::default();
    let twin = wild_twin(&cfg);
    let data = explore_data(&cfg, 60, 8, Interval::new(0.5, 1.0));
    let q = disagreement_quantile(&twin, &data, 0.5).unwrap();
    assert!((q - 10.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// With κ at least the largest per-step cost, entering HALT can only
    /// lower the return.
    #[test]
    fn pessimistic_return_not_above_plain(
        enter in 0usize..4,
        fan in 0.4f64..1.0,
        gamma in 0.0f64..0.99,
    ) {
        let cfg = PlantConfig::default();
        let plain = Twin::from_config(cfg.clone()).unwrap();
        let spec = MdpSpec { gamma, ..MdpSpec::default() };
        let sla = SlaEnvelope::default();
        let s0 = warm_state(&cfg);
        let a = ControlAction::uniform(7.0, 22.0, fan, cfg.n_crah);
        let h = 4;
        let forecast = [exo(); 4];
        let p_traj = rollout(&plain, &s0, &mut Hold(a.clone()), &forecast, h, &spec, &sla);
        let kappa = p_traj.rewards().iter().fold(0.0f64, |m, r| m.max(-r));
        // Pessimistic model that halts once step `enter` is reached.
        struct HaltAt { twin: Twin, at: usize, kappa: f64 }
        impl TwinModel for HaltAt {
            fn transition(&self, s: &PlantState, a: &ControlAction, e: &ExogenousInput) -> crate::Result<ModelStep> {
                if s.halted || (s.sim_time / 900.0).round() as usize >= self.at {
                    return Ok(ModelStep { next: PlantState::halt(), members: vec![] });
                }
                self.twin.transition(s, a, e)
            }
            fn reward(&self, spec: &MdpSpec, n: &PlantState) -> f64 {
                if n.halted { -self.kappa } else { spec.reward(n) }
            }
        }
        let m = HaltAt { twin: plain.clone(), at: enter, kappa };
        let mut s = s0.clone();
        s.sim_time = 0.0;
        let q_traj = rollout(&m, &s, &mut Hold(a), &forecast, h, &spec, &sla);
        prop_assert_eq!(q_traj.halted_at, Some(enter));
        prop_assert!(q_traj.ret <= p_traj.ret + 1e-9);
    }

    #[test]
    fn rollout_energy_is_additive(k in 0usize..=6, fan in 0.5f64..1.0, sat in 19.0f64..24.0) {
        let cfg = PlantConfig::default();
        let twin = Twin::from_config(cfg.clone()).unwrap();
        let spec = MdpSpec::default();
        let sla = SlaEnvelope::default();
        let s0 = warm_state(&cfg);
        let a = ControlAction::uniform(7.0, sat, fan, cfg.n_crah);
        let tr = trace(6, 3);
        let whole = rollout(&twin, &s0, &mut Hold(a.clone()), &tr.samples, 6, &spec, &sla);
        let first = rollout(&twin, &s0, &mut Hold(a.clone()), &tr.samples[..k], k, &spec, &sla);
        let mid = first.steps.last().map(|s| s.state.clone()).unwrap_or(s0);
        let rest = rollout(&twin, &mid, &mut Hold(a), &tr.samples[k..], 6 - k, &spec, &sla);
        prop_assert!((whole.energy_kwh - first.energy_kwh - rest.energy_kwh).abs() < 1e-9);
    }
}

fn calibration_data(cfg: &PlantConfig, steps: usize, seed: u64) -> Dataset {
    let bounds = ActionBounds::for_scope(Scope::CrahChw, cfg.n_crah);
    let bounds = ActionBounds::uniform(cfg.n_crah, bounds.chws(), Interval::new(20.0, 24.0), Interval::new(0.6, 1.0));
    dataset::explore(cfg, &trace(steps, seed), &bounds, &NoiseConfig::noiseless(), seed).unwrap()
}

#[test]
fn calibration_is_self_consistent() {
    let cfg = PlantConfig::default();
    let data = calibration_data(&cfg, 96, 9);
    let theta0 = TwinParams::from_config(&cfg);
    let r = calibrate(&data, &cfg, &theta0, &CalibrationConfig::default()).unwrap();
    assert!(r.initial_objective <= 1e-20);
    assert!(r.objective <= 1e-8);
    r.params.validate().unwrap();
}

#[test]
fn calibration_recovers_hidden_cop() {
    let truth = PlantConfig {
        chiller_cop_ref: 5.0,
        ..PlantConfig::default()
    };
    let data = calibration_data(&truth, 96, 10);
    let base = PlantConfig::default();
    let theta0 = TwinParams::subset(&base, &[ParamName::ChillerCopRef, ParamName::CopCondSlope, ParamName::TowerApproach]);
    let r = calibrate(&data, &base, &theta0, &CalibrationConfig::default()).unwrap();
    let cop = r.params.get(ParamName::ChillerCopRef).unwrap();
    assert!((cop - 5.0).abs() / 5.0 < 0.02, "cop {cop}");
    assert!(r.objective <= r.initial_objective);
    for p in &r.params.params {
        assert!(p.value >= p.lo && p.value <= p.hi);
    }
}

#[test]
fn calibration_budget_flag() {
    let truth = PlantConfig {
        chiller_cop_ref: 5.0,
        tower_approach: 5.0,
        ..PlantConfig::default()
    };
    let data = calibration_data(&truth, 48, 11);
    let base = PlantConfig::default();
    let theta0 = TwinParams::from_config(&base);
    let cc = CalibrationConfig {
        max_evals_per_start: 15,
        restarts: 1,
        ..CalibrationConfig::default()
    };
    let r = calibrate(&data, &base, &theta0, &cc).unwrap();
    assert!(r.budget_exhausted);
    assert!(r.objective <= r.initial_objective);
}

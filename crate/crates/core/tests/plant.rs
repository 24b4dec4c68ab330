use proptest::prelude::*;
use tocsim_core::control::steady_state_input;
use tocsim_core::rng::{substream, Purpose};
use tocsim_core::{ControlInput, PlantModel, PlantState};

fn decoupled() -> PlantModel {
    PlantModel {
        beta: 0.0,
        eta: 0.0,
        actuation_noise_std: 0.0,
        ..PlantModel::default()
    }
}

#[test]
fn derivative_by_substitution() {
    let m = PlantModel::default();
    let d = m.derivative(PlantState::new(1.0, 0.0), ControlInput::default()).unwrap();
    assert_eq!((d.temperature, d.pressure), (-1.0, 0.5));
    let d = m.derivative(PlantState::default(), ControlInput::default()).unwrap();
    assert_eq!((d.temperature, d.pressure), (0.0, 0.0));
    assert!(m.derivative(PlantState::new(f64::NAN, 0.0), ControlInput::default()).is_err());
}

#[test]
fn operating_point_is_equilibrium() {
    let m = PlantModel::default();
    let x = PlantState::new(2.5, 2.0);
    let u = steady_state_input(x, &m).unwrap().input;
    let d = m.derivative(x, u).unwrap();
    assert!(d.temperature.abs() < 1e-12 && d.pressure.abs() < 1e-12);
}

#[test]
fn rk4_matches_exponential() {
    let s = decoupled().step_rk4(PlantState::new(1.0, 0.0), ControlInput::default(), 0.1).unwrap();
    assert!((s.temperature - 0.904_837_42).abs() < 1e-6);
    assert_eq!(s.pressure, 0.0);
}

#[test]
fn rk4_rejects_negative_step() {
    let m = PlantModel::default();
    assert!(m.step_rk4(PlantState::default(), ControlInput::default(), -1e-3).is_err());
}

fn max_error(h: f64) -> f64 {
    let m = decoupled();
    let n = (1.0 / h).round() as usize;
    let mut s = PlantState::new(1.0, 0.0);
    (1..=n)
        .map(|i| {
            s = m.step_rk4(s, ControlInput::default(), h).unwrap();
            (s.temperature - (-(i as f64) * h).exp()).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn rk4_is_fourth_order() {
    let e = [0.02, 0.01, 0.005].map(max_error);
    for r in [e[0] / e[1], e[1] / e[2]] {
        assert!((12.0..=20.0).contains(&r), "ratio {r}");
    }
}

// The pressure channel under constant input has the closed form
// P(t) = P_ss + (P0 - P_ss) e^{-gamma t} + c (e^{-alpha t} - e^{-gamma t}) / (gamma - alpha)
// once T is exponential; checked here with alpha != gamma.
#[test]
fn coupled_linear_hold_matches_closed_form() {
    let m = PlantModel {
        alpha: 2.0,
        gamma: 0.5,
        eta: 0.0,
        actuation_noise_std: 0.0,
        ..PlantModel::default()
    };
    let u = ControlInput::new(1.0, 0.3);
    let (t_ss, t0) = (u.heat_rate / m.alpha, 0.0);
    let p_ss = (m.beta * t_ss + u.piston_rate) / m.gamma;
    let c = m.beta * (t0 - t_ss);
    let exact = |t: f64| {
        let temp = t_ss + (t0 - t_ss) * (-m.alpha * t).exp();
        let a = c / (m.gamma - m.alpha);
        let pres = p_ss + a * (-m.alpha * t).exp() + (0.0 - p_ss - a) * (-m.gamma * t).exp();
        (temp, pres)
    };
    let mut rng = substream(0, Purpose::Simulate, 0, 0, 0);
    let out = m.simulate_hold(PlantState::new(t0, 0.0), u, 1.0, 0.005, &mut rng).unwrap();
    for &(t, s) in &out.path {
        let (te, pe) = exact(t);
        assert!((s.temperature - te).abs() < 1e-9 && (s.pressure - pe).abs() < 1e-9, "t={t}");
    }
    assert_eq!(out.elapsed, 1.0);
}

#[test]
fn nonlinear_hold_converges_under_refinement() {
    let m = PlantModel {
        actuation_noise_std: 0.0,
        ..PlantModel::default()
    };
    let u = ControlInput::new(5.0, -2.0);
    let x0 = PlantState::new(0.5, 1.0);
    let mut rng = substream(0, Purpose::Simulate, 0, 0, 0);
    let coarse = m.simulate_hold(x0, u, 0.5, 0.005, &mut rng).unwrap().final_state;
    let fine = m.simulate_hold(x0, u, 0.5, 0.000_05, &mut rng).unwrap().final_state;
    assert!(coarse.distance(&fine) < 1e-9);
}

#[test]
fn hold_stops_at_box_exit() {
    let m = PlantModel {
        constraint_box_half_width: 1.0,
        actuation_noise_std: 0.0,
        ..PlantModel::default()
    };
    let mut rng = substream(0, Purpose::Simulate, 0, 0, 0);
    let out = m.simulate_hold(PlantState::default(), ControlInput::new(5.0, 5.0), 2.0, 0.005, &mut rng).unwrap();
    assert!(out.left_box);
    assert!(out.elapsed < 2.0);
    assert!(!out.final_state.in_box(1.0));
}

#[test]
fn hold_noise_is_drawn_once_and_clamped() {
    let m = PlantModel {
        actuation_noise_std: 0.5,
        ..PlantModel::default()
    };
    let mut rng = substream(3, Purpose::Simulate, 0, 0, 0);
    let out = m.simulate_hold(PlantState::default(), ControlInput::new(5.0, 0.0), 0.05, 0.005, &mut rng).unwrap();
    assert!(out.applied.heat_rate <= 5.0);
    assert_ne!(out.applied.piston_rate, 0.0);
    assert_eq!(out.path.len(), 10);
}

proptest! {
    #[test]
    fn zero_step_is_identity(t in -10.0..10.0f64, p in -10.0..10.0f64, u1 in -5.0..5.0f64, u2 in -5.0..5.0f64) {
        let s = PlantState::new(t, p);
        prop_assert_eq!(PlantModel::default().step_rk4(s, ControlInput::new(u1, u2), 0.0).unwrap(), s);
    }

    #[test]
    fn feasible_targets_are_equilibria(t in -3.0..3.0f64, p in -3.0..3.0f64) {
        let m = PlantModel::default();
        let x = PlantState::new(t, p);
        let ss = steady_state_input(x, &m).unwrap();
        prop_assume!(!ss.clamped);
        let d = m.derivative(x, ss.input).unwrap();
        prop_assert!(d.temperature.abs() < 1e-12 && d.pressure.abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_held_without_noise(t in 0.0..3.0f64, p in 0.0..3.0f64) {
        let m = PlantModel { actuation_noise_std: 0.0, ..PlantModel::default() };
        let x = PlantState::new(t, p);
        let u = steady_state_input(x, &m).unwrap().input;
        let mut rng = substream(0, Purpose::Simulate, 0, 0, 0);
        let out = m.simulate_hold(x, u, 0.1, 0.005, &mut rng).unwrap();
        prop_assert!(out.final_state.distance(&x) < 1e-10);
    }

    #[test]
    fn applied_control_respects_bounds(u1 in -8.0..8.0f64, u2 in -8.0..8.0f64, seed in 0u64..1000) {
        let m = PlantModel { actuation_noise_std: 1.0, ..PlantModel::default() };
        let mut rng = substream(seed, Purpose::Simulate, 0, 0, 0);
        let out = m.simulate_hold(PlantState::default(), ControlInput::new(u1, u2).clamp(m.control_bounds), 0.01, 0.005, &mut rng).unwrap();
        prop_assert!(m.control_bounds.contains(&out.applied));
    }
}

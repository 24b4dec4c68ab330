use std::f64::consts::PI;

use proptest::prelude::*;
use tocsim_core::experiment::{fixed_policies, scale_periods, ExperimentConfig};
use tocsim_core::viability::{estimate_capture_basin, sample_priors, write_kernel_csv, KernelOptions, KERNEL_CSV_HEADER};
use tocsim_core::rng::{substream, Purpose};
use tocsim_core::{estimate_kernel, is_edge_state, Label, LabeledPrior, PhaseSpec, PlantState};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Green), Just(Label::Red), Just(Label::Blue), Just(Label::Yellow)]
}

fn labeled() -> impl Strategy<Value = Vec<LabeledPrior>> {
    prop::collection::vec(
        (-1.0..1.0f64, -1.0..1.0f64, label()).prop_map(|(t, p, l)| LabeledPrior::new(PlantState::new(t, p), l)),
        0..30,
    )
}

fn opts(n_priors: usize, seed: u64) -> KernelOptions {
    KernelOptions {
        n_priors,
        n_cycles: 0,
        repetitions: 1,
        seed,
    }
}

fn with_budget(phases: &[PhaseSpec; 3], factor: f64) -> [PhaseSpec; 3] {
    phases.map(|p| PhaseSpec {
        time_budget: p.time_budget * factor,
        ..p
    })
}

proptest! {
    #[test]
    fn edge_test_ignores_prior_order(priors in labeled(), t in -1.0..1.0f64, p in -1.0..1.0f64, rho in 0.05..0.8f64) {
        let x = PlantState::new(t, p);
        let mut rev = priors.clone();
        rev.reverse();
        prop_assert_eq!(is_edge_state(x, &priors, rho), is_edge_state(x, &rev, rho));
    }

    #[test]
    fn edge_test_matches_definition(priors in labeled(), t in -1.0..1.0f64, p in -1.0..1.0f64, rho in 0.05..0.8f64) {
        let x = PlantState::new(t, p);
        let near: Vec<_> = priors.iter().filter(|q| q.point.distance(&x) <= rho).collect();
        let good = near.iter().any(|q| q.label.is_viable_start());
        let bad = near.iter().any(|q| !q.label.is_viable_start());
        prop_assert_eq!(is_edge_state(x, &priors, rho), near.is_empty() || (good && bad));
    }

    #[test]
    fn priors_lie_in_the_disc(seed in 0u64..1000, r in 0.01..2.0f64, n in 1usize..200) {
        let c = PlantState::new(1.0, -0.5);
        let pts = sample_priors(c, r, n, &mut substream(seed, Purpose::Priors, 1, 0, 0)).unwrap();
        prop_assert_eq!(pts.len(), n);
        prop_assert!(pts.iter().all(|p| p.distance(&c) <= r));
    }
}

#[test]
fn edge_examples() {
    let g = LabeledPrior::new(PlantState::new(0.0, 0.0), Label::Green);
    let r = LabeledPrior::new(PlantState::new(0.2, 0.0), Label::Red);
    let y = LabeledPrior::new(PlantState::new(0.0, 0.2), Label::Yellow);
    let b = LabeledPrior::new(PlantState::new(-0.2, 0.0), Label::Blue);
    let x = PlantState::new(0.0, 0.0);
    assert!(is_edge_state(x, &[], 0.3));
    assert!(!is_edge_state(x, &[g, y], 0.3));
    assert!(is_edge_state(x, &[g, r], 0.3));
    assert!(is_edge_state(x, &[y, b], 0.3));
    assert!(!is_edge_state(x, &[r, b], 0.3));
    // the red prior is just out of reach
    assert!(!is_edge_state(x, &[g, r], 0.19));
}

#[test]
fn width_is_viable_area_of_the_disc() {
    let cfg = ExperimentConfig::default();
    let phases = cfg.phase_specs().unwrap();
    let est = estimate_kernel(&phases, &fixed_policies(), &cfg.plant, &opts(40, 2)).unwrap();
    for e in &est {
        let viable = e.priors.iter().filter(|p| p.label.is_viable_start()).count();
        assert_eq!(e.priors.len(), 40);
        assert!((e.viable_fraction - viable as f64 / 40.0).abs() < 1e-15);
        assert!((e.width - e.viable_fraction * PI * e.radius * e.radius).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&e.sustained_fraction));
    }
}

#[test]
fn single_prior_is_all_or_nothing() {
    let cfg = ExperimentConfig::default();
    let phases = cfg.phase_specs().unwrap();
    for seed in 0..5 {
        let est = estimate_kernel(&phases, &fixed_policies(), &cfg.plant, &opts(1, seed)).unwrap();
        for e in &est {
            assert!(e.viable_fraction == 0.0 || e.viable_fraction == 1.0);
        }
    }
    // the nominal design keeps level 2 and 3 fully viable, so a lone prior there is green
    let est = estimate_kernel(&phases, &fixed_policies(), &cfg.plant, &opts(1, 0)).unwrap();
    assert_eq!(est[1].viable_fraction, 1.0);
    assert_eq!(est[2].viable_fraction, 1.0);
}

#[test]
fn longer_budgets_never_lose_priors() {
    let cfg = ExperimentConfig::default();
    let phases = cfg.phase_specs().unwrap();
    for seed in 0..3 {
        let short = estimate_kernel(&phases, &fixed_policies(), &cfg.plant, &opts(60, seed)).unwrap();
        let long = estimate_kernel(&with_budget(&phases, 1.5), &fixed_policies(), &cfg.plant, &opts(60, seed)).unwrap();
        for (s, l) in short.iter().zip(&long) {
            for (a, b) in s.priors.iter().zip(&l.priors) {
                assert_eq!(a.point, b.point);
                assert!(!a.label.is_viable_start() || b.label.is_viable_start(), "seed {seed} level {}", s.level);
            }
        }
    }
}

#[test]
fn halving_the_period_never_turns_a_prior_red() {
    let cfg = ExperimentConfig::default();
    let quiet = tocsim_core::PlantModel {
        actuation_noise_std: 0.0,
        ..cfg.plant
    };
    let phases = cfg.phase_specs().unwrap();
    let halved = scale_periods(&phases, 0.5);
    for seed in 0..3 {
        let nominal = estimate_kernel(&phases, &fixed_policies(), &quiet, &opts(100, seed)).unwrap();
        let fast = estimate_kernel(&halved, &fixed_policies(), &quiet, &opts(100, seed)).unwrap();
        for (n, f) in nominal.iter().zip(&fast) {
            for (a, b) in n.priors.iter().zip(&f.priors) {
                assert!(!a.label.is_viable_start() || b.label.is_viable_start(), "seed {seed} level {} prior {:?}", n.level, a.point);
            }
        }
    }
}

#[test]
fn capture_basin_grows_with_the_window() {
    let cfg = ExperimentConfig::default();
    let phases = cfg.phase_specs().unwrap();
    let o = opts(60, 4);
    // level 1 priors, carried to level 2 by phase 2
    let tiny = estimate_capture_basin(&phases, 1, &phases[1], 1e-6, &tocsim_core::CommPolicy::Fixed, &cfg.plant, &o).unwrap();
    assert_eq!(tiny.viable_fraction, 0.0);
    let mut last: Option<Vec<bool>> = None;
    for w in [0.2, 0.4, 0.6, 1.0, 2.0] {
        let basin = estimate_capture_basin(&phases, 1, &phases[1], w, &tocsim_core::CommPolicy::Fixed, &cfg.plant, &o).unwrap();
        let mask = basin.green_mask();
        if let Some(prev) = &last {
            assert!(prev.iter().zip(&mask).all(|(a, b)| !a || *b), "window {w}");
        }
        last = Some(mask);
    }
    assert!(last.unwrap().iter().all(|&g| g));
}

#[test]
fn kernel_csv_has_one_row_per_prior() {
    let cfg = ExperimentConfig::default();
    let phases = cfg.phase_specs().unwrap();
    let est = estimate_kernel(&phases, &fixed_policies(), &cfg.plant, &opts(7, 0)).unwrap();
    let mut buf = Vec::new();
    write_kernel_csv(&mut buf, &est).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], KERNEL_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 21);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], (i / 7 + 1).to_string());
        assert!(["green", "red", "blue", "yellow"].contains(&cols[3]));
    }
}

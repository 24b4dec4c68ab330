//! Monte-Carlo estimates of viability kernels and capture basins.
//!
//! Each level `n` gets a batch of priors drawn uniformly from its
//! neighborhood disc. A prior is *green* when the phase leaving level `n`
//! reaches level `n + 1` from it, *blue* when a green rollout of the previous
//! phase landed on it, *yellow* when both hold, and *red* otherwise.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commloop::{run_cycle, run_phase, CommPolicy, PhaseOutcome};
use crate::control::{next_phase_index, previous_phase_index, PhaseSpec};
use crate::error::{Error, Result};
use crate::plant::{PlantModel, PlantState};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Green,
    Red,
    Blue,
    Yellow,
}

impl Label {
    fn from_flags(green: bool, blue: bool) -> Label {
        match (green, blue) {
            (true, true) => Label::Yellow,
            (true, false) => Label::Green,
            (false, true) => Label::Blue,
            (false, false) => Label::Red,
        }
    }

    /// Whether the next phase succeeded from this point (green or yellow).
    pub fn is_viable_start(self) -> bool {
        matches!(self, Label::Green | Label::Yellow)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Green => "green",
            Label::Red => "red",
            Label::Blue => "blue",
            Label::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrior {
    pub point: PlantState,
    pub label: Label,
}

impl LabeledPrior {
    pub fn new(point: PlantState, label: Label) -> Self {
        Self { point, label }
    }
}

/// Settings an estimate was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSettings {
    pub policy: String,
    pub noise_std: f64,
    pub seed: u64,
    pub n_priors: usize,
    pub n_cycles: usize,
    pub repetitions: usize,
}

/// Labeled priors of one level plus derived size metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    /// Level the priors were drawn around (1, 2 or 3).
    pub level: u8,
    pub center: PlantState,
    pub radius: f64,
    pub priors: Vec<LabeledPrior>,
    /// `|green ∪ yellow| / n_priors`.
    pub viable_fraction: f64,
    pub width: f64,
    /// Fraction of priors from which `n_cycles` full cycles completed.
    pub sustained_fraction: f64,
    /// Arrival states from the previous phase that matched no prior.
    pub unmatched_arrivals: Vec<PlantState>,
    pub settings: KernelSettings,
}

impl KernelEstimate {
    pub fn count(&self, label: Label) -> usize {
        self.priors.iter().filter(|p| p.label == label).count()
    }

    pub fn green_mask(&self) -> Vec<bool> {
        self.priors.iter().map(|p| p.label.is_viable_start()).collect()
    }
}

/// Knobs shared by kernel and basin estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub n_priors: usize,
    pub n_cycles: usize,
    /// Rollouts per prior; a prior is green on a strict majority.
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            n_priors: 50,
            n_cycles: 3,
            repetitions: 1,
            seed: 0,
        }
    }
}

/// `n` points uniform on the closed disc of `radius` about `center`.
pub fn sample_priors<R: Rng + ?Sized>(center: PlantState, radius: f64, n: usize, rng: &mut R) -> Result<Vec<PlantState>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("prior radius must be > 0, got {radius}")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one prior"));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let dx = rng.random_range(-radius..=radius);
        let dy = rng.random_range(-radius..=radius);
        let p = PlantState::new(center.temperature + dx, center.pressure + dy);
        // rejection on the same distance the containment checks use
        if p.distance(&center) <= radius {
            out.push(p);
        }
    }
    Ok(out)
}

/// Green when `phase` (the phase leaving the prior's level) succeeds from
/// `prior` without violations.
pub fn classify_start<R: Rng + ?Sized>(
    prior: PlantState,
    phase: &PhaseSpec,
    policy: &CommPolicy,
    model: &PlantModel,
    rng: &mut R,
) -> Result<Label> {
    let out = run_phase(prior, phase, policy, model, rng)?;
    Ok(if out.reached { Label::Green } else { Label::Red })
}

/// Closed-disc edge test: true when the disc of radius `rho` about `state`
/// holds both a viable-start and a non-viable prior, or holds no prior.
pub fn is_edge_state(state: PlantState, labeled: &[LabeledPrior], rho: f64) -> bool {
    let mut viable = false;
    let mut unviable = false;
    for p in labeled {
        if p.point.distance(&state) <= rho {
            if p.label.is_viable_start() {
                viable = true;
            } else {
                unviable = true;
            }
            if viable && unviable {
                return true;
            }
        }
    }
    !viable && !unviable
}

/// Monte-Carlo area of the viable region of the level disc.
pub fn kernel_width(estimate: &KernelEstimate) -> f64 {
    estimate.viable_fraction * PI * estimate.radius * estimate.radius
}

/// Kernel estimates together with the per-prior rollouts behind them.
#[derive(Debug, Clone)]
pub struct KernelRun {
    pub estimates: [KernelEstimate; 3],
    /// `rollouts[n - 1][i]`: first rollout of prior `i` of level `n`.
    pub rollouts: [Vec<PhaseOutcome>; 3],
}

impl KernelRun {
    /// Labeled priors of the level that phase `phase_index` departs from.
    pub fn labeled_for_phase(&self, phase_index: u8) -> &[LabeledPrior] {
        let level = previous_phase_index(phase_index);
        &self.estimates[level as usize - 1].priors
    }
}

fn check_phases(phases: &[PhaseSpec; 3]) -> Result<()> {
    for (i, p) in phases.iter().enumerate() {
        if p.index as usize != i + 1 {
            return Err(Error::Config(format!("phase at position {} has index {}", i + 1, p.index)));
        }
    }
    Ok(())
}

/// Priors of level `level` for a master seed; shared by every policy.
pub fn level_priors(phases: &[PhaseSpec; 3], level: u8, n_priors: usize, seed: u64) -> Result<Vec<PlantState>> {
    let p = &phases[level as usize - 1];
    let mut rng = substream(seed, Purpose::Priors, level, 0, 0);
    sample_priors(p.target, p.neighborhood_radius, n_priors, &mut rng)
}

struct PriorResult {
    green: bool,
    first: PhaseOutcome,
    arrival: Option<PlantState>,
    sustained: bool,
}

fn roll_prior(
    prior: PlantState,
    level: u8,
    index: u32,
    phases: &[PhaseSpec; 3],
    policies: &[CommPolicy; 3],
    model: &PlantModel,
    opts: &KernelOptions,
) -> Result<PriorResult> {
    let phase_idx = next_phase_index(level) as usize - 1;
    let mut wins = 0usize;
    let mut first = None;
    let mut arrival = None;
    for rep in 0..opts.repetitions {
        let mut rng = substream(opts.seed, Purpose::Rollout, level, rep as u16, index);
        let out = run_phase(prior, &phases[phase_idx], &policies[phase_idx], model, &mut rng)?;
        if out.reached {
            wins += 1;
            arrival.get_or_insert(out.final_state);
        }
        first.get_or_insert(out);
    }
    let green = 2 * wins > opts.repetitions;
    let sustained = if opts.n_cycles > 0 {
        let mut rng = substream(opts.seed, Purpose::Sustain, level, 0, index);
        run_cycle(prior, phases, policies, model, &mut rng, opts.n_cycles)?.viable
    } else {
        green
    };
    Ok(PriorResult {
        green,
        // repetitions >= 1 is checked by the caller
        first: first.expect("at least one repetition"),
        arrival: if green { arrival } else { None },
        sustained,
    })
}

/// Labels priors at all three levels under the given per-phase policies.
pub fn estimate_kernel_detailed(
    phases: &[PhaseSpec; 3],
    policies: &[CommPolicy; 3],
    model: &PlantModel,
    opts: &KernelOptions,
) -> Result<KernelRun> {
    check_phases(phases)?;
    if opts.n_priors == 0 {
        return Err(Error::invalid("n_priors must be >= 1"));
    }
    if opts.repetitions == 0 {
        return Err(Error::invalid("repetitions must be >= 1"));
    }

    let mut priors = Vec::with_capacity(3);
    let mut results = Vec::with_capacity(3);
    for level in 1..=3u8 {
        let pts = level_priors(phases, level, opts.n_priors, opts.seed)?;
        let res = pts
            .par_iter()
            .enumerate()
            .map(|(i, &p)| roll_prior(p, level, i as u32, phases, policies, model, opts))
            .collect::<Result<Vec<_>>>()?;
        priors.push(pts);
        results.push(res);
    }

    let policy_name = policies.iter().map(|p| p.name()).collect::<Vec<_>>().join("/");
    let settings = KernelSettings {
        policy: policy_name,
        noise_std: model.actuation_noise_std,
        seed: opts.seed,
        n_priors: opts.n_priors,
        n_cycles: opts.n_cycles,
        repetitions: opts.repetitions,
    };

    let mut estimates = Vec::with_capacity(3);
    for level in 1..=3u8 {
        let li = level as usize - 1;
        let spec = &phases[li];
        let pts = &priors[li];
        let mut blue = vec![false; pts.len()];
        let mut unmatched = Vec::new();
        let feeder = previous_phase_index(level) as usize - 1;
        let match_radius = spec.neighborhood_radius / 5.0;
        for r in &results[feeder] {
            let Some(a) = r.arrival else { continue };
            let nearest = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p.distance(&a)))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            match nearest {
                Some((i, d)) if d <= match_radius => blue[i] = true,
                _ => unmatched.push(a),
            }
        }
        let labeled: Vec<LabeledPrior> = pts
            .iter()
            .zip(&results[li])
            .zip(&blue)
            .map(|((&p, r), &b)| LabeledPrior::new(p, Label::from_flags(r.green, b)))
            .collect();
        let n = labeled.len() as f64;
        let viable = labeled.iter().filter(|p| p.label.is_viable_start()).count() as f64;
        let sustained = results[li].iter().filter(|r| r.sustained).count() as f64;
        let mut est = KernelEstimate {
            level,
            center: spec.target,
            radius: spec.neighborhood_radius,
            priors: labeled,
            viable_fraction: viable / n,
            width: 0.0,
            sustained_fraction: sustained / n,
            unmatched_arrivals: unmatched,
            settings: settings.clone(),
        };
        est.width = kernel_width(&est);
        estimates.push(est);
    }

    let mut results = results.into_iter().map(|r| r.into_iter().map(|p| p.first).collect::<Vec<_>>());
    let rollouts = [
        results.next().unwrap_or_default(),
        results.next().unwrap_or_default(),
        results.next().unwrap_or_default(),
    ];
    let estimates: [KernelEstimate; 3] = estimates
        .try_into()
        .map_err(|_| Error::invalid("expected three levels"))?;
    Ok(KernelRun { estimates, rollouts })
}

pub fn estimate_kernel(
    phases: &[PhaseSpec; 3],
    policies: &[CommPolicy; 3],
    model: &PlantModel,
    opts: &KernelOptions,
) -> Result<[KernelEstimate; 3]> {
    Ok(estimate_kernel_detailed(phases, policies, model, opts)?.estimates)
}

/// Priors of `start_level` that reach the level of `phase` within
/// `time_window`, with no cycling requirement.
///
/// Uses the same prior and rollout streams as [`estimate_kernel`], so basins
/// for different windows are directly comparable.
pub fn estimate_capture_basin(
    phases: &[PhaseSpec; 3],
    start_level: u8,
    phase: &PhaseSpec,
    time_window: f64,
    policy: &CommPolicy,
    model: &PlantModel,
    opts: &KernelOptions,
) -> Result<KernelEstimate> {
    check_phases(phases)?;
    if !(time_window > 0.0) {
        return Err(Error::invalid(format!("time window must be > 0, got {time_window}")));
    }
    if !(1..=3).contains(&start_level) {
        return Err(Error::invalid(format!("start level must be 1..=3, got {start_level}")));
    }
    let windowed = PhaseSpec {
        time_budget: time_window,
        ..*phase
    };
    let pts = level_priors(phases, start_level, opts.n_priors, opts.seed)?;
    let labels = pts
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = substream(opts.seed, Purpose::Rollout, start_level, 0, i as u32);
            classify_start(p, &windowed, policy, model, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let priors: Vec<LabeledPrior> = pts.into_iter().zip(labels).map(|(p, l)| LabeledPrior::new(p, l)).collect();
    let green = priors.iter().filter(|p| p.label.is_viable_start()).count() as f64;
    let spec = &phases[start_level as usize - 1];
    let mut est = KernelEstimate {
        level: start_level,
        center: spec.target,
        radius: spec.neighborhood_radius,
        viable_fraction: green / priors.len() as f64,
        width: 0.0,
        sustained_fraction: 0.0,
        priors,
        unmatched_arrivals: Vec::new(),
        settings: KernelSettings {
            policy: policy.name().to_string(),
            noise_std: model.actuation_noise_std,
            seed: opts.seed,
            n_priors: opts.n_priors,
            n_cycles: 0,
            repetitions: 1,
        },
    };
    est.width = kernel_width(&est);
    Ok(est)
}

pub const KERNEL_CSV_HEADER: &str = "phase,prior_x,prior_y,label";

/// One row per prior; `phase` is the level the prior was drawn around.
pub fn write_kernel_csv<W: Write>(mut w: W, estimates: &[KernelEstimate]) -> std::io::Result<()> {
    writeln!(w, "{KERNEL_CSV_HEADER}")?;
    for e in estimates {
        for p in &e.priors {
            writeln!(
                w,
                "{},{},{},{}",
                e.level,
                p.point.temperature,
                p.point.pressure,
                p.label.as_str()
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: u8,
    pub n_priors: usize,
    pub viable_fraction: f64,
    pub width: f64,
    pub sustained_fraction: f64,
    pub green: usize,
    pub blue: usize,
    pub yellow: usize,
    pub red: usize,
    pub unmatched_arrivals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub policy: String,
    pub seed: u64,
    pub noise_std: f64,
    pub levels: Vec<LevelSummary>,
}

impl KernelSummary {
    pub fn new(policy: impl Into<String>, estimates: &[KernelEstimate]) -> Self {
        let first = estimates.first();
        Self {
            policy: policy.into(),
            seed: first.map_or(0, |e| e.settings.seed),
            noise_std: first.map_or(0.0, |e| e.settings.noise_std),
            levels: estimates
                .iter()
                .map(|e| LevelSummary {
                    level: e.level,
                    n_priors: e.priors.len(),
                    viable_fraction: e.viable_fraction,
                    width: e.width,
                    sustained_fraction: e.sustained_fraction,
                    green: e.count(Label::Green),
                    blue: e.count(Label::Blue),
                    yellow: e.count(Label::Yellow),
                    red: e.count(Label::Red),
                    unmatched_arrivals: e.unmatched_arrivals.len(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(t: f64, p: f64, label: Label) -> LabeledPrior {
        LabeledPrior::new(PlantState::new(t, p), label)
    }

    #[test]
    fn label_flags() {
        assert_eq!(Label::from_flags(true, true), Label::Yellow);
        assert_eq!(Label::from_flags(true, false), Label::Green);
        assert_eq!(Label::from_flags(false, true), Label::Blue);
        assert_eq!(Label::from_flags(false, false), Label::Red);
        assert!(Label::Yellow.is_viable_start());
        assert!(!Label::Blue.is_viable_start());
    }

    #[test]
    fn edge_cases_of_edge_test() {
        let s = PlantState::new(0.0, 0.0);
        let greens = [lp(0.1, 0.0, Label::Green), lp(0.0, 0.2, Label::Yellow)];
        assert!(!is_edge_state(s, &greens, 0.3));
        let mixed = [lp(0.1, 0.0, Label::Green), lp(0.0, -0.2, Label::Red)];
        assert!(is_edge_state(s, &mixed, 0.3));
        // the red one is outside the disc
        let split = [lp(0.1, 0.0, Label::Green), lp(0.0, -0.5, Label::Red)];
        assert!(!is_edge_state(s, &split, 0.3));
        assert!(is_edge_state(s, &[], 0.3));
        assert!(is_edge_state(s, &[lp(2.0, 2.0, Label::Green)], 0.3));
        // closed disc
        assert!(is_edge_state(s, &[lp(0.3, 0.0, Label::Green), lp(-0.3, 0.0, Label::Red)], 0.3));
    }

    #[test]
    fn width_is_fraction_of_disc_area() {
        let mut e = KernelEstimate {
            level: 1,
            center: PlantState::default(),
            radius: 0.35,
            priors: Vec::new(),
            viable_fraction: 0.0,
            width: 0.0,
            sustained_fraction: 0.0,
            unmatched_arrivals: Vec::new(),
            settings: KernelSettings {
                policy: "fixed".into(),
                noise_std: 0.0,
                seed: 0,
                n_priors: 0,
                n_cycles: 0,
                repetitions: 1,
            },
        };
        assert_eq!(kernel_width(&e), 0.0);
        e.viable_fraction = 1.0;
        assert!((kernel_width(&e) - 0.384_845_1).abs() < 1e-6);
        e.viable_fraction = 0.6;
        assert!((kernel_width(&e) - 0.230_907_1).abs() < 1e-6);
    }

    #[test]
    fn prior_sampling_contract() {
        let c = PlantState::new(2.5, 2.0);
        let mut r = substream(5, Purpose::Priors, 1, 0, 0);
        let pts = sample_priors(c, 0.35, 50, &mut r).unwrap();
        assert_eq!(pts.len(), 50);
        assert!(pts.iter().all(|p| p.distance(&c) <= 0.35));

        let mut r = substream(5, Purpose::Priors, 1, 0, 0);
        assert_eq!(pts, sample_priors(c, 0.35, 50, &mut r).unwrap());

        let mut r = substream(5, Purpose::Priors, 1, 0, 0);
        let tiny = sample_priors(c, 1e-12, 20, &mut r).unwrap();
        assert!(tiny.iter().all(|p| p.distance(&c) <= 1e-12));

        assert!(sample_priors(c, 0.0, 5, &mut r).is_err());
        assert!(sample_priors(c, 0.3, 0, &mut r).is_err());
    }

    #[test]
    fn prior_sampling_is_area_uniform() {
        // P(r <= R/2) = 1/4 for a uniform disc
        let c = PlantState::default();
        let mut r = substream(9, Purpose::Priors, 2, 0, 0);
        let pts = sample_priors(c, 1.0, 20_000, &mut r).unwrap();
        let inner = pts.iter().filter(|p| p.distance(&c) <= 0.5).count() as f64 / 20_000.0;
        assert!((inner - 0.25).abs() < 0.015, "inner fraction {inner}");
    }
}

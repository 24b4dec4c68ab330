//! Sampled-data loop over the link: at each exchange instant the state goes
//! up, one control comes down and is held until the next instant.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{feedback_control, in_neighborhood, next_phase_index, PhaseSpec};
use crate::error::{Error, Result};
use crate::plant::{ControlInput, PlantModel, PlantState};
use crate::viability::{is_edge_state, LabeledPrior};

/// How the next update interval is chosen.
#[derive(Debug, Clone)]
pub enum CommPolicy {
    /// Constant period equal to the phase's `base_update_period`.
    Fixed,
    Adaptive(AdaptivePolicy),
}

/// Fast updates near the edge of the estimated kernel, base updates elsewhere.
#[derive(Debug, Clone)]
pub struct AdaptivePolicy {
    pub base_period: f64,
    pub fast_period: f64,
    pub edge_radius: f64,
    pub labeled: Arc<[LabeledPrior]>,
}

impl AdaptivePolicy {
    /// Adaptive policy using the phase's own base and fast periods.
    pub fn for_phase(phase: &PhaseSpec, edge_radius: f64, labeled: impl Into<Arc<[LabeledPrior]>>) -> Self {
        Self {
            base_period: phase.base_update_period,
            fast_period: phase.fast_update_period,
            edge_radius,
            labeled: labeled.into(),
        }
    }
}

impl CommPolicy {
    pub fn validate(&self, phase: &PhaseSpec) -> Result<()> {
        match self {
            CommPolicy::Fixed => {
                if !(phase.base_update_period > 0.0) || !phase.base_update_period.is_finite() {
                    return Err(Error::Config(format!(
                        "phase {}: fixed policy needs a positive base period",
                        phase.index
                    )));
                }
            }
            CommPolicy::Adaptive(a) => {
                if a.labeled.is_empty() {
                    return Err(Error::Config(format!(
                        "phase {}: adaptive policy needs a non-empty labeled prior set",
                        phase.index
                    )));
                }
                if !(a.fast_period > 0.0) || !(a.fast_period <= a.base_period) || !a.base_period.is_finite() {
                    return Err(Error::Config(format!(
                        "phase {}: adaptive periods need 0 < fast <= base (fast {}, base {})",
                        phase.index, a.fast_period, a.base_period
                    )));
                }
                if !(a.edge_radius > 0.0) {
                    return Err(Error::Config(format!(
                        "phase {}: edge radius must be > 0",
                        phase.index
                    )));
                }
            }
        }
        Ok(())
    }

    fn next_interval(&self, state: PlantState, phase: &PhaseSpec) -> f64 {
        match self {
            CommPolicy::Fixed => phase.base_update_period,
            CommPolicy::Adaptive(a) => {
                if is_edge_state(state, &a.labeled, a.edge_radius) {
                    a.fast_period
                } else {
                    a.base_period
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CommPolicy::Fixed => "fixed",
            CommPolicy::Adaptive(_) => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    None,
    LeftConstraintBox,
    BudgetExhausted,
}

/// One row of a recorded trajectory. `applied` is the control in force from
/// `t` onwards; `update` marks exchange instants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub state: PlantState,
    pub applied: ControlInput,
    pub update: bool,
}

/// What crossed the link at one exchange instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exchange {
    pub t: f64,
    pub state: PlantState,
    pub commanded: ControlInput,
    pub applied: ControlInput,
    pub interval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phase_index: u8,
    pub reached: bool,
    pub elapsed: f64,
    pub updates_count: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub exchanges: Vec<Exchange>,
    pub violation: Violation,
    pub final_state: PlantState,
}

// float sums of update periods drift by a few ulps
const TIME_EPS: f64 = 1e-9;

/// Drives the plant toward `phase.target` until it is observed inside the
/// neighborhood at an exchange instant, leaves the constraint box, or runs out
/// of time budget.
pub fn run_phase<R: Rng + ?Sized>(
    start: PlantState,
    phase: &PhaseSpec,
    policy: &CommPolicy,
    model: &PlantModel,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    drive(start, phase, policy, model, rng, None)
}

/// Keeps the phase controller in the loop for a fixed `window`, through
/// arrival and beyond. Stops early only on leaving the constraint box.
/// `reached` reports whether the state ends inside the neighborhood.
pub fn run_window<R: Rng + ?Sized>(
    start: PlantState,
    phase: &PhaseSpec,
    policy: &CommPolicy,
    model: &PlantModel,
    rng: &mut R,
    window: f64,
) -> Result<PhaseOutcome> {
    if !(window >= 0.0) || !window.is_finite() {
        return Err(Error::invalid(format!("window must be finite and >= 0, got {window}")));
    }
    drive(start, phase, policy, model, rng, Some(window))
}

fn drive<R: Rng + ?Sized>(
    start: PlantState,
    phase: &PhaseSpec,
    policy: &CommPolicy,
    model: &PlantModel,
    rng: &mut R,
    window: Option<f64>,
) -> Result<PhaseOutcome> {
    if !start.is_finite() {
        return Err(Error::invalid("non-finite start state"));
    }
    if !(phase.neighborhood_radius > 0.0) || !(phase.time_budget >= 0.0) {
        return Err(Error::Config(format!(
            "phase {}: needs radius > 0 and budget >= 0",
            phase.index
        )));
    }
    policy.validate(phase)?;

    let h = model.integration_step;
    let mut x = start;
    let mut t = 0.0;
    let mut updates = 0u64;
    let mut trajectory = Vec::new();
    let mut exchanges = Vec::new();
    let mut held = ControlInput::default();

    let violation = loop {
        match window {
            None if in_neighborhood(x, phase) => break Violation::None,
            Some(w) if t >= w - TIME_EPS => break Violation::None,
            _ => {}
        }
        let interval = policy.next_interval(x, phase);
        let commanded = feedback_control(x, phase, model)?;
        updates += 1;
        let hold = model.simulate_hold(x, commanded, interval, h, rng)?;
        trajectory.push(TrajectoryPoint {
            t,
            state: x,
            applied: hold.applied,
            update: true,
        });
        exchanges.push(Exchange {
            t,
            state: x,
            commanded,
            applied: hold.applied,
            interval,
        });
        if let Some((_, inner)) = hold.path.split_last() {
            trajectory.extend(inner.iter().map(|&(tau, s)| TrajectoryPoint {
                t: t + tau,
                state: s,
                applied: hold.applied,
                update: false,
            }));
        }
        t += hold.elapsed;
        x = hold.final_state;
        held = hold.applied;
        if hold.left_box {
            break Violation::LeftConstraintBox;
        }
        if window.is_none() && t > phase.time_budget + TIME_EPS {
            break Violation::BudgetExhausted;
        }
    };
    let reached = match (violation, window) {
        (Violation::None, Some(_)) => in_neighborhood(x, phase),
        (v, _) => v == Violation::None,
    };

    trajectory.push(TrajectoryPoint {
        t,
        state: x,
        applied: held,
        update: false,
    });
    Ok(PhaseOutcome {
        phase_index: phase.index,
        reached,
        elapsed: t,
        updates_count: updates,
        trajectory,
        exchanges,
        violation,
        final_state: x,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    /// Phase outcomes in execution order; stops at the first failure.
    pub phases: Vec<PhaseOutcome>,
    pub viable: bool,
    pub total_updates: u64,
    pub total_time: f64,
}

/// Level (1-based) whose neighborhood contains `state`, or else the level
/// with the nearest operating point.
pub fn level_of(state: PlantState, phases: &[PhaseSpec; 3]) -> u8 {
    if let Some(p) = phases.iter().find(|p| in_neighborhood(state, p)) {
        return p.index;
    }
    phases
        .iter()
        .min_by(|a, b| state.distance(&a.target).total_cmp(&state.distance(&b.target)))
        .map(|p| p.index)
        .unwrap_or(1)
}

/// Runs `n_cycles` full cycles starting with the phase that leaves the
/// start's level. `phases[i]` and `policies[i]` belong to phase `i + 1`.
pub fn run_cycle<R: Rng + ?Sized>(
    start: PlantState,
    phases: &[PhaseSpec; 3],
    policies: &[CommPolicy; 3],
    model: &PlantModel,
    rng: &mut R,
    n_cycles: usize,
) -> Result<CycleOutcome> {
    if n_cycles == 0 {
        return Err(Error::invalid("n_cycles must be >= 1"));
    }
    if !start.is_finite() {
        return Err(Error::invalid("non-finite start state"));
    }
    for (i, p) in phases.iter().enumerate() {
        if p.index as usize != i + 1 {
            return Err(Error::Config(format!(
                "phase at position {} has index {}",
                i + 1,
                p.index
            )));
        }
    }

    let mut current = next_phase_index(level_of(start, phases));
    let mut x = start;
    let mut outcomes = Vec::with_capacity(3 * n_cycles);
    let mut viable = true;
    for _ in 0..3 * n_cycles {
        let i = current as usize - 1;
        let out = run_phase(x, &phases[i], &policies[i], model, rng)?;
        x = out.final_state;
        let reached = out.reached;
        outcomes.push(out);
        if !reached {
            viable = false;
            break;
        }
        current = next_phase_index(current);
    }
    Ok(CycleOutcome {
        total_updates: outcomes.iter().map(|o| o.updates_count).sum(),
        total_time: outcomes.iter().map(|o| o.elapsed).sum(),
        phases: outcomes,
        viable,
    })
}

/// Updates and time attributed to one phase index.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseRate {
    pub phase_index: u8,
    pub updates: u64,
    pub elapsed: f64,
    /// Number of phase executions pooled into this entry.
    pub runs: u64,
    /// Updates per unit time; `None` when no time elapsed.
    pub rate: Option<f64>,
}

impl PhaseRate {
    pub fn new(phase_index: u8) -> Self {
        Self {
            phase_index,
            ..Self::default()
        }
    }

    pub fn add(&mut self, outcome: &PhaseOutcome) {
        self.updates += outcome.updates_count;
        self.elapsed += outcome.elapsed;
        self.runs += 1;
        self.rate = (self.elapsed > 0.0).then(|| self.updates as f64 / self.elapsed);
    }

    pub fn updates_per_run(&self) -> Option<f64> {
        (self.runs > 0).then(|| self.updates as f64 / self.runs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub overall: f64,
    /// Entries for phases 1, 2, 3 (in that order).
    pub per_phase: Vec<PhaseRate>,
}

/// Updates per unit time over a whole cycle outcome, plus the per-phase split.
pub fn comm_rate(outcome: &CycleOutcome) -> Result<RateReport> {
    if !(outcome.total_time > 0.0) {
        return Err(Error::UndefinedRate);
    }
    let mut per_phase: Vec<PhaseRate> = (1..=3).map(PhaseRate::new).collect();
    for p in &outcome.phases {
        if let Some(slot) = per_phase.get_mut(p.phase_index as usize - 1) {
            slot.add(p);
        }
    }
    Ok(RateReport {
        overall: outcome.total_updates as f64 / outcome.total_time,
        per_phase,
    })
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,temperature,pressure,u1_applied,u2_applied,update_flag,phase_index";

/// Writes the cycle as CSV with time measured from the cycle start.
pub fn write_trajectory_csv<W: Write>(mut w: W, outcome: &CycleOutcome) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_CSV_HEADER}")?;
    let mut offset = 0.0;
    for phase in &outcome.phases {
        for p in &phase.trajectory {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                offset + p.t,
                p.state.temperature,
                p.state.pressure,
                p.applied.heat_rate,
                p.applied.piston_rate,
                u8::from(p.update),
                phase.phase_index
            )?;
        }
        offset += phase.elapsed;
    }
    Ok(())
}

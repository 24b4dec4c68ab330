//! Per-phase state feedback and the geometry of the three operating levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{ControlInput, PlantModel, PlantState};

/// 2x2 state-feedback gain, row-major: `u = K (target - state)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GainMatrix(pub [[f64; 2]; 2]);

impl GainMatrix {
    pub const fn diag(k_temperature: f64, k_pressure: f64) -> Self {
        GainMatrix([[k_temperature, 0.0], [0.0, k_pressure]])
    }

    pub const fn zero() -> Self {
        GainMatrix([[0.0; 2]; 2])
    }

    pub fn apply(&self, e: PlantState) -> ControlInput {
        let k = &self.0;
        ControlInput::new(
            k[0][0] * e.temperature + k[0][1] * e.pressure,
            k[1][0] * e.temperature + k[1][1] * e.pressure,
        )
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Default for GainMatrix {
    fn default() -> Self {
        GainMatrix::diag(2.0, 2.0)
    }
}

/// One leg of the cycle: reach the neighborhood of `target` within
/// `time_budget`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    /// 1, 2 or 3; phase `n` steers the plant into level `n`.
    pub index: u8,
    pub target: PlantState,
    pub neighborhood_radius: f64,
    pub base_update_period: f64,
    pub fast_update_period: f64,
    pub time_budget: f64,
    pub gain: GainMatrix,
}

impl PhaseSpec {
    /// Checks the configuration invariants
    /// `0 < fast <= base <= budget` and `radius > 0`.
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("phase{}.{name}", self.index);
        if !(1..=3).contains(&self.index) {
            return Err(Error::field("phase.index", format!("must be 1, 2 or 3, got {}", self.index)));
        }
        if !self.target.is_finite() {
            return Err(Error::field(f("target"), "must be finite"));
        }
        if !(self.neighborhood_radius > 0.0) || !self.neighborhood_radius.is_finite() {
            return Err(Error::field(f("neighborhood_radius"), "must be > 0"));
        }
        if !(self.fast_update_period > 0.0) {
            return Err(Error::field(f("fast_update_period"), "must be > 0"));
        }
        if self.fast_update_period > self.base_update_period {
            return Err(Error::field(
                f("fast_update_period"),
                format!(
                    "must not exceed base_update_period ({} > {})",
                    self.fast_update_period, self.base_update_period
                ),
            ));
        }
        if !(self.base_update_period <= self.time_budget) || !self.time_budget.is_finite() {
            return Err(Error::field(
                f("time_budget"),
                format!(
                    "must be finite and >= base_update_period ({} < {})",
                    self.time_budget, self.base_update_period
                ),
            ));
        }
        if !self.gain.is_finite() {
            return Err(Error::field(f("gain"), "must be finite"));
        }
        Ok(())
    }

    /// Index of the phase that follows this one in the cycle 1 -> 2 -> 3 -> 1.
    pub fn successor(&self) -> u8 {
        next_phase_index(self.index)
    }
}

pub fn next_phase_index(index: u8) -> u8 {
    index % 3 + 1
}

pub fn previous_phase_index(index: u8) -> u8 {
    (index + 1) % 3 + 1
}

/// Equilibrium feedforward for a target, with a flag set when it had to be
/// clamped to the control bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateInput {
    pub input: ControlInput,
    pub clamped: bool,
}

/// `u1 = alpha T`, `u2 = (gamma P - beta T) / (1 + eta T)`.
pub fn steady_state_input(target: PlantState, model: &PlantModel) -> Result<SteadyStateInput> {
    let raw = raw_steady_state_input(target, model)?;
    let input = raw.clamp(model.control_bounds);
    Ok(SteadyStateInput {
        input,
        clamped: input != raw,
    })
}

fn raw_steady_state_input(target: PlantState, model: &PlantModel) -> Result<ControlInput> {
    if !target.is_finite() {
        return Err(Error::invalid("non-finite target"));
    }
    let denom = 1.0 + model.eta * target.temperature;
    if denom == 0.0 {
        return Err(Error::SingularTarget {
            temperature: target.temperature,
        });
    }
    Ok(ControlInput::new(
        model.alpha * target.temperature,
        (model.gamma * target.pressure - model.beta * target.temperature) / denom,
    ))
}

/// `u = u_ss(target) + K (target - state)`, clamped to the control bounds.
pub fn feedback_control(state: PlantState, phase: &PhaseSpec, model: &PlantModel) -> Result<ControlInput> {
    if !state.is_finite() {
        return Err(Error::invalid("non-finite state"));
    }
    let ss = steady_state_input(phase.target, model)?.input;
    Ok(add(ss, phase.gain.apply(phase.target - state)).clamp(model.control_bounds))
}

/// Feedback law with every clamp removed. Exposed for checking the affine
/// structure of the controller.
pub fn feedback_control_unclamped(state: PlantState, phase: &PhaseSpec, model: &PlantModel) -> Result<ControlInput> {
    if !state.is_finite() {
        return Err(Error::invalid("non-finite state"));
    }
    let ss = raw_steady_state_input(phase.target, model)?;
    Ok(add(ss, phase.gain.apply(phase.target - state)))
}

fn add(a: ControlInput, b: ControlInput) -> ControlInput {
    ControlInput::new(a.heat_rate + b.heat_rate, a.piston_rate + b.piston_rate)
}

/// Diagonal gain that places the closed-loop pole of each channel at `pole`
/// under zero-order hold with period `period`, linearized at `target`.
///
/// Each channel is treated as the scalar lag `x' = -c x + b u`, so
/// `k = c (e^{-c period} - pole) / (b (1 - e^{-c period}))`. The coupling
/// `beta T` is ignored; the feedforward absorbs it at the target.
pub fn synthesize_gain(target: PlantState, period: f64, pole: f64, model: &PlantModel) -> Result<GainMatrix> {
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::invalid(format!("gain synthesis period must be > 0, got {period}")));
    }
    if !(pole.abs() < 1.0) {
        return Err(Error::invalid(format!("closed-loop pole must lie in (-1, 1), got {pole}")));
    }
    let b = 1.0 + model.eta * target.temperature;
    if b == 0.0 {
        return Err(Error::SingularTarget {
            temperature: target.temperature,
        });
    }
    let channel = |c: f64, b: f64| {
        let a = (-c * period).exp();
        c * (a - pole) / (b * (1.0 - a))
    };
    Ok(GainMatrix::diag(channel(model.alpha, 1.0), channel(model.gamma, b)))
}

/// Closed-disc membership test for the phase's target level.
pub fn in_neighborhood(state: PlantState, phase: &PhaseSpec) -> bool {
    state.distance(&phase.target) <= phase.neighborhood_radius
}

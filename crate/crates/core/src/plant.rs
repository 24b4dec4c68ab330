//! Two-state plant (normalized temperature and pressure) driven by heat supply
//! and piston displacement rates.
//!
//! Dynamics:
//!
//! ```text
//! dT/dt = -alpha T + u1
//! dP/dt =  beta T - gamma P + eta T u2 + u2
//! ```
//!
//! integrated with fixed-step RK4 under a zero-order hold.

use std::ops::{Add, Mul, Sub};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized plant state; `(0, 0)` is ambient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub temperature: f64,
    pub pressure: f64,
}

impl PlantState {
    pub const fn new(temperature: f64, pressure: f64) -> Self {
        Self {
            temperature,
            pressure,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.temperature.is_finite() && self.pressure.is_finite()
    }

    pub fn distance(&self, other: &PlantState) -> f64 {
        (self.temperature - other.temperature).hypot(self.pressure - other.pressure)
    }

    /// True while both coordinates lie in `[-half_width, half_width]`.
    pub fn in_box(&self, half_width: f64) -> bool {
        self.temperature.abs() <= half_width && self.pressure.abs() <= half_width
    }
}

impl Add for PlantState {
    type Output = PlantState;
    fn add(self, rhs: PlantState) -> PlantState {
        PlantState::new(self.temperature + rhs.temperature, self.pressure + rhs.pressure)
    }
}

impl Sub for PlantState {
    type Output = PlantState;
    fn sub(self, rhs: PlantState) -> PlantState {
        PlantState::new(self.temperature - rhs.temperature, self.pressure - rhs.pressure)
    }
}

impl Mul<f64> for PlantState {
    type Output = PlantState;
    fn mul(self, rhs: f64) -> PlantState {
        PlantState::new(self.temperature * rhs, self.pressure * rhs)
    }
}

/// Time derivative of [`PlantState`].
pub type StateRate = PlantState;

/// Heat supply rate and piston displacement rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub heat_rate: f64,
    pub piston_rate: f64,
}

impl ControlInput {
    pub const fn new(heat_rate: f64, piston_rate: f64) -> Self {
        Self {
            heat_rate,
            piston_rate,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heat_rate.is_finite() && self.piston_rate.is_finite()
    }

    pub fn clamp(self, bounds: ControlBounds) -> ControlInput {
        ControlInput::new(
            self.heat_rate.clamp(bounds.min, bounds.max),
            self.piston_rate.clamp(bounds.min, bounds.max),
        )
    }
}

/// Per-component saturation interval shared by both inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlBounds {
    pub min: f64,
    pub max: f64,
}

impl ControlBounds {
    pub fn contains(&self, u: &ControlInput) -> bool {
        (self.min..=self.max).contains(&u.heat_rate) && (self.min..=self.max).contains(&u.piston_rate)
    }
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            min: -5.0,
            max: 5.0,
        }
    }
}

/// Plant coefficients, actuation noise and admissible sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantModel {
    /// Heat-loss coefficient.
    pub alpha: f64,
    /// Temperature to pressure coupling.
    pub beta: f64,
    /// Pressure relaxation.
    pub gamma: f64,
    /// Bilinear temperature/piston coupling.
    pub eta: f64,
    /// Std of the Gaussian perturbation added to each control component once
    /// per hold interval.
    pub actuation_noise_std: f64,
    pub control_bounds: ControlBounds,
    /// Half width `B` of the state constraint box `[-B, B]^2`.
    pub constraint_box_half_width: f64,
    /// RK4 step used inside hold intervals.
    pub integration_step: f64,
}

impl Default for PlantModel {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            eta: 0.25,
            actuation_noise_std: 0.05,
            control_bounds: ControlBounds::default(),
            constraint_box_half_width: 10.0,
            integration_step: 0.005,
        }
    }
}

impl PlantModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("actuation_noise_std", self.actuation_noise_std),
            ("control_bounds.min", self.control_bounds.min),
            ("control_bounds.max", self.control_bounds.max),
            ("constraint_box_half_width", self.constraint_box_half_width),
            ("integration_step", self.integration_step),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::field(format!("plant.{name}"), "must be finite"));
            }
        }
        if self.alpha <= 0.0 {
            return Err(Error::field("plant.alpha", "must be > 0"));
        }
        if self.beta < 0.0 {
            return Err(Error::field("plant.beta", "must be >= 0"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::field("plant.gamma", "must be > 0"));
        }
        if self.eta < 0.0 {
            return Err(Error::field("plant.eta", "must be >= 0"));
        }
        if self.actuation_noise_std < 0.0 {
            return Err(Error::field("plant.actuation_noise_std", "must be >= 0"));
        }
        if self.control_bounds.min >= self.control_bounds.max {
            return Err(Error::field("plant.control_bounds", "min must be < max"));
        }
        if self.constraint_box_half_width <= 0.0 {
            return Err(Error::field("plant.constraint_box_half_width", "must be > 0"));
        }
        if self.integration_step <= 0.0 {
            return Err(Error::field("plant.integration_step", "must be > 0"));
        }
        Ok(())
    }

    /// Right-hand side of the plant ODE. Noise free.
    pub fn derivative(&self, state: PlantState, input: ControlInput) -> Result<StateRate> {
        if !state.is_finite() || !input.is_finite() {
            return Err(Error::invalid("non-finite state or input"));
        }
        Ok(self.rhs(state, input))
    }

    #[inline]
    fn rhs(&self, s: PlantState, u: ControlInput) -> StateRate {
        StateRate::new(
            -self.alpha * s.temperature + u.heat_rate,
            self.beta * s.temperature - self.gamma * s.pressure
                + self.eta * s.temperature * u.piston_rate
                + u.piston_rate,
        )
    }

    /// One classical RK4 step with the input held constant.
    pub fn step_rk4(&self, state: PlantState, input: ControlInput, h: f64) -> Result<PlantState> {
        if !(h >= 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("step size must be finite and >= 0, got {h}")));
        }
        if !state.is_finite() || !input.is_finite() {
            return Err(Error::invalid("non-finite state or input"));
        }
        if h == 0.0 {
            return Ok(state);
        }
        Ok(self.rk4(state, input, h))
    }

    #[inline]
    fn rk4(&self, s: PlantState, u: ControlInput, h: f64) -> PlantState {
        let k1 = self.rhs(s, u);
        let k2 = self.rhs(s + k1 * (h / 2.0), u);
        let k3 = self.rhs(s + k2 * (h / 2.0), u);
        let k4 = self.rhs(s + k3 * h, u);
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Applies `commanded` (plus one actuation noise draw, clamped to the
    /// bounds) for `duration` time units.
    ///
    /// The hold is cut short if the state leaves the constraint box; that is
    /// reported through [`HoldOutcome::left_box`], not as an error.
    pub fn simulate_hold<R: Rng + ?Sized>(
        &self,
        state: PlantState,
        commanded: ControlInput,
        duration: f64,
        h: f64,
        rng: &mut R,
    ) -> Result<HoldOutcome> {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(Error::invalid(format!("hold duration must be >= 0, got {duration}")));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("step size must be > 0, got {h}")));
        }
        if !state.is_finite() || !commanded.is_finite() {
            return Err(Error::invalid("non-finite state or input"));
        }

        let applied = self.perturb(commanded, rng);
        let steps = step_count(duration, h);
        let mut path = Vec::with_capacity(steps);
        let mut s = state;
        let mut t = 0.0;
        let mut left_box = false;
        for i in 0..steps {
            let dt = if i + 1 == steps { duration - t } else { h };
            s = self.rk4(s, applied, dt);
            t = if i + 1 == steps { duration } else { t + h };
            path.push((t, s));
            if !s.is_finite() || !s.in_box(self.constraint_box_half_width) {
                left_box = true;
                break;
            }
        }
        Ok(HoldOutcome {
            final_state: s,
            applied,
            path,
            elapsed: t,
            left_box,
        })
    }

    fn perturb<R: Rng + ?Sized>(&self, commanded: ControlInput, rng: &mut R) -> ControlInput {
        if self.actuation_noise_std == 0.0 {
            return commanded;
        }
        // std > 0 is guaranteed by validate(); a bad model falls back to noise free
        let Ok(normal) = Normal::new(0.0, self.actuation_noise_std) else {
            return commanded;
        };
        ControlInput::new(
            commanded.heat_rate + normal.sample(rng),
            commanded.piston_rate + normal.sample(rng),
        )
        .clamp(self.control_bounds)
    }
}

/// Number of integrator steps for a hold of `duration` with nominal step `h`.
fn step_count(duration: f64, h: f64) -> usize {
    if duration == 0.0 {
        return 0;
    }
    let n = (duration / h).ceil();
    // absorb round-off such as 0.05 / 0.005 = 10.000000000000002
    let n = if n > 1.0 && (n - 1.0) * h >= duration * (1.0 - 1e-9) {
        n - 1.0
    } else {
        n
    };
    n as usize
}

/// Result of one zero-order-hold interval.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldOutcome {
    pub final_state: PlantState,
    /// Control actually applied (commanded plus noise, clamped).
    pub applied: ControlInput,
    /// `(time since hold start, state)` after each integrator step.
    pub path: Vec<(f64, PlantState)>,
    /// Time covered before the hold ended; shorter than requested only when
    /// the state left the box.
    pub elapsed: f64,
    pub left_box: bool,
}

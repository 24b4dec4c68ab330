//! Simulation toolkit for a remotely controlled two-state plant: viability
//! kernel estimation by sampling, kernel-aware update scheduling over the
//! control link, and transfer entropy between state and control series.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commloop;
pub mod control;
pub mod error;
pub mod experiment;
pub mod infotheory;
pub mod plant;
pub mod rng;
pub mod viability;

pub use commloop::{comm_rate, run_cycle, run_phase, run_window, AdaptivePolicy, CommPolicy, CycleOutcome, PhaseOutcome, Violation};
pub use control::{feedback_control, in_neighborhood, steady_state_input, synthesize_gain, GainMatrix, PhaseSpec};
pub use error::{Error, Result};
pub use infotheory::{discretize, effective_te, transfer_entropy, SymbolSeries, TeResult};
pub use plant::{ControlBounds, ControlInput, PlantModel, PlantState};
pub use viability::{estimate_kernel, is_edge_state, kernel_width, KernelEstimate, Label, LabeledPrior};
pub use experiment::{load_config, ComparisonReport, ExperimentConfig, Runner};

//! Local Volt/VAR control on linearized distribution feeders.
//!
//! The crate simulates non-incremental (IEEE 1547 curve), incremental
//! (proximal-gradient) and accelerated incremental rules on a feeder described
//! by its reactance/resistance sensitivity matrices, computes equilibria with an
//! independent coordinate-descent solver, and designs incremental rule
//! parameters by differentiating through an unrolled emulator of the rule
//! dynamics.
//!
//! Module map:
//!
//! - [`grid`]: feeder model, grid conditions, spectral helpers.
//! - [`rules`]: curve, proximal operator, update equations, parameter maps.
//! - [`dynamics`]: closed-loop simulation and stability checks.
//! - [`equilibrium`]: equilibrium oracle and the design objective.
//! - [`emulator`]: unrolled forward pass and reverse-mode gradients.
//! - [`analysis`]: step sizes, depth bounds and iteration estimates.
//! - [`trainer`]: projected stochastic training of rule parameters.
//! - [`scenarios`]: scenario files and synthetic generation.
//! - [`synth`]: random synthetic feeders used by tests and demos.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod emulator;
pub mod equilibrium;
mod error;
pub mod grid;
pub mod rules;
pub mod scenarios;
pub mod synth;
pub mod trainer;
mod util;

pub use error::{Error, Result};
pub use grid::{FeederModel, PhaseLayout, Scenario};
pub use rules::{RuleParams, TransformedParams};

/// Library version, as reported by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Version of the on-disk JSON/CSV formats read and written by this crate.
pub const FORMAT_VERSION: u32 = 1;

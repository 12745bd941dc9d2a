//! Three-regime poverty-trap model with an optimal signaling decision.
//!
//! The pipeline is: [`hjb::solve_hjb`] for values, policies and the signal
//! region; [`kfe`] for the stationary distribution; [`diagnostics`] for
//! reported statistics; [`mc`] as a simulation cross-check; [`pipeline`] for
//! file-level orchestration used by the `twinpeaks` binary.

// Negated float comparisons are deliberate: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod diagnostics;
pub mod grid;
pub mod hjb;
pub mod kfe;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod pipeline;

pub use calibration::Calibration;
pub use grid::{Grid, Regime, Triple};

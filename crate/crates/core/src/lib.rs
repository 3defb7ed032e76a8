//! Forward investment performance under slow and fast stochastic factors.
//!
//! The crate evaluates leading-order value surfaces built from a Widder
//! measure, their first-order slow and fast corrections, the associated
//! approximately optimal portfolios, and a closed-form power-utility
//! benchmark used to measure convergence rates.

// `!(a > b)` rejects NaN along with the failing case; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod numerics;
pub mod factor_models;
pub mod widder_core;
pub mod expansion;
pub mod power_exact;
pub mod portfolio;
pub mod drift_audit;
pub mod cli_harness;

pub use error::{Error, Result};

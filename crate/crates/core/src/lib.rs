//! Obviously strategy-proof trading mechanisms for allocating heterogeneous
//! tasks among agents with private linear costs and a status-quo outside
//! option.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: scenarios, expected assignments, lotteries.
//! - [`lp`]: a dense simplex solver and Farkas alternatives.
//! - [`geometry`]: polarization tests and separating directions.
//! - [`mechanisms`]: trading protocols, the ex-post optimal selection rule,
//!   OSP verification and Monte-Carlo evaluation.
//! - [`choice`]: conditions under which choice beats the status quo, and
//!   bilateral improvements.
//! - [`bic`]: exact Bayesian-incentive-compatible LP on finite type grids.
//! - [`large_market`]: support functions, dual ascent, primal recovery and
//!   replica economies.
//! - [`report`]: run manifests and report serialization for the CLI.

pub mod bic;
pub mod choice;
pub mod error;
pub mod geometry;
pub mod large_market;
pub mod lp;
pub mod mechanisms;
pub mod prob;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};

/// Default absolute tolerance for equality checks.
pub const TOL: f64 = 1e-9;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

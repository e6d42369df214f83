//! Finite-horizon Kullback-Leibler-Quadratic (KLQ) optimal control for
//! Markov decision models.
//!
//! The control cost is a per-step relative entropy rate between the
//! controlled and nominal randomized policies, plus a quadratic penalty on
//! tracking error of the mean output. The optimizer is an exponential
//! tilting of the nominal policy, computed by maximizing a concave dual
//! functional over the tracking multipliers. A subspace relaxation
//! (Fourier or degenerate basis) compresses long reference signals.
//!
//! Crate layout:
//! - [`model`]: finite MDP data model, marginal propagation, KL rates
//! - [`basis`]: transform bases for the subspace relaxation
//! - [`dual`]: the dual solver (tilted backward recursion, gradient ascent)
//! - [`diagnostics`]: likelihood-ratio and entropy identities, tracking stats
//! - [`tcl`]: the thermostatically-controlled-load (refrigerator) instance
//! - [`fleet`]: finite-population Monte Carlo simulation and the MPC loop
//! - [`cli`]: command-line orchestration and CSV emission

pub mod basis;
pub mod cli;
pub mod diagnostics;
pub mod dual;
mod error;
pub mod fixtures;
pub mod fleet;
pub mod model;
pub mod tcl;

pub use error::{Error, Result};

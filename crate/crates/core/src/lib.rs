//! Numerical laboratory for discrete-time diffusion samplers.
//!
//! The crate implements the vanilla DDIM/DDPM-type reverse updates together
//! with their accelerated counterparts (a second-order deterministic sampler
//! and a two-noise stochastic sampler), runs them against Gaussian-mixture
//! targets whose scores are known in closed form, and measures how the
//! sampling error decays with the number of steps.
//!
//! Module map:
//!
//! - [`schedule`]: the two-phase step-size schedule and its property checks.
//! - [`target`]: Gaussian-mixture targets, forward marginals, scores.
//! - [`oracle`]: score evaluation (exact, perturbed, NFE-counting).
//! - [`samplers`]: the five reverse samplers and the trajectory runner.
//! - [`analysis`]: exact law propagation, TV/KL/W1 metrics, rate fits.
//! - [`cli`]: JSON-configured experiment runner behind the `difflab` binary.

pub mod analysis;
pub mod cli;
mod error;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod target;

pub use error::{Error, Result};

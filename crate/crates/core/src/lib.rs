//! Bayesian affordance prediction on precomputed image/object features.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: vectors, matrices, activations and seedable RNG streams.
//! - [`model`]: the fused object/scene classifier head with dropout and
//!   analytic gradients.
//! - [`train`]: Adam minibatch training with step-decay learning rate.
//! - [`bayes`]: MC-dropout and deep-ensemble posterior sampling plus the
//!   aleatoric/epistemic covariance decomposition.
//! - [`metrics`]: accuracy at three label granularities, ECE and Brier score.
//! - [`data`]: feature-record datasets, statistics, splits and synthetic
//!   generators.
//! - [`cli`]: the `affordance` command-line tool.

pub mod bayes;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};

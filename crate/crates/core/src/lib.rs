//! Likelihood-weighted normalizing flows.
//!
//! Trains RealNVP flows to approximate a Bayesian posterior using only draws from
//! the prior, each weighted by its likelihood. The crate also carries the analytic
//! benchmark targets and the metrics (Monte-Carlo KL, marginal and sliced
//! Wasserstein-1) used to score a trained flow against ground truth.
//!
//! Module map:
//! - [`diffnet`]: MLP conditioners with hand-written reverse-mode gradients.
//! - [`distributions`]: Gaussian mixtures, uniform boxes, analytic targets.
//! - [`flow`]: affine coupling layers, exact densities, sampling, serialization.
//! - [`training`]: weighted datasets, weight preprocessing, Adam, the training loop.
//! - [`metrics`]: KL and Wasserstein estimators.
//! - [`bench`]: benchmark registry and experiment harness.
//! - [`cli`]: config files, CSV/JSON formats and the subcommands of the `wflow` binary.

pub mod bench;
pub mod cli;
pub mod diffnet;
pub mod distributions;
mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

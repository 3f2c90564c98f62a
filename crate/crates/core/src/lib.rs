//! Scaling laws of one-pass SGD on Gaussian-sketched linear regression.
//!
//! The crate simulates the sketched linear model exactly, evaluates the
//! closed-form approximation / bias / variance decomposition of its risk,
//! checks the spectral behaviour of sketched power-law covariances and fits
//! scaling-law exponents to Monte Carlo estimates.
//!
//! Modules, bottom-up:
//!
//! - [`spectrum`]: diagonal covariance spectra and the Gaussian prior on `w*`.
//! - [`sketch`]: Gaussian sketches, the sketched eigensystem, approximation error
//!   and concentration diagnostics.
//! - [`sgd`]: one-pass SGD (last iterate with geometric decay, averaged iterate
//!   with constant step) through a fast eigenbasis path and a direct oracle path.
//! - [`risk`]: exact population risk and the closed-form decomposition.
//! - [`theory`]: predicted rates, stepsizes and compute-optimal allocations.
//! - [`fit`]: Huber-loss scaling-law fits and log-log slopes.
//! - [`harness`]: Monte Carlo grids, aggregation and file outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod harness;
pub mod plot;
pub mod risk;
pub mod seed;
pub mod sgd;
pub mod sketch;
pub mod spectrum;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};

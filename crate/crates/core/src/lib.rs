//! Bayesian multivariate functional principal component analysis for
//! sparse, irregularly sampled longitudinal data.
//!
//! The crate is organised bottom-up: [`basis`] builds an orthonormal spline
//! basis, [`data`] standardises long-format observations, [`posterior`]
//! evaluates the log density and its gradient, [`sampler`] runs NUTS or a
//! blocked Gibbs scheme, [`postprocess`] aligns draws and computes
//! diagnostics, [`predict`] produces trajectory predictions, and
//! [`simharness`] runs simulation studies.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod persist;
pub mod posterior;
pub mod postprocess;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod simharness;
pub mod stats;

pub use error::{Error, ErrorKind, Result};

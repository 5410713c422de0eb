//! Averaged-uncertainty robust regression.
//!
//! Averaging the squared residual `‖y − (X + Δ)β‖²` uniformly over a bounded
//! set of design perturbations `Δ` yields ridge regression with a penalty
//! that depends only on the shape and radius of the set. This crate provides:
//!
//! - [`geometry`]: the four perturbation sets (ellipsoidal, box, diamond,
//!   budget), their volumes, per-entry second moments and ridge penalties.
//! - [`sampling`]: hit-and-run and rejection samplers over those sets, plus
//!   nested-level sampling for monotone perturbation strengths.
//! - [`regression`]: OLS, averaged-uncertainty ridge (AUR), worst-case robust
//!   regression (WUR) and cross-validated penalty selection.
//! - [`audit`]: Monte Carlo checks of every closed-form constant.
//! - [`dataio`]: CSV ingestion, preprocessing, synthetic data and splits.
//! - [`harness`]: experiment matrices, summaries and plot data.
//! - [`cli`]: the `aurlab` command line front end.

pub mod audit;
pub mod cli;
pub mod dataio;
mod error;
pub mod geometry;
pub mod harness;
pub mod regression;
pub mod rng;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{PenaltyMode, SetKind, UncertaintySet};
pub use regression::{FitResult, Method, RegressionProblem};

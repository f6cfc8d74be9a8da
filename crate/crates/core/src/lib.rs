//! Long-term average treatment effects from a short-term experiment combined
//! with a confounded observational sample, via outcome and selection bridge
//! functions of three ordered groups of short-term outcomes.
//!
//! The crate covers the data model, synthetic data-generating processes with
//! exact oracles, GMM bridge fitters, the cross-fitted outcome, selection and
//! doubly robust estimators, a covariate-shift extension, and a Monte Carlo
//! benchmark harness.

pub mod bench;
pub mod covshift;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod linalg;
pub mod rng;
pub mod synthetic;

pub use data::{CombinedSample, FoldAssignment, Group, LatentLog, ObservationRow};
pub use error::{Error, Result};

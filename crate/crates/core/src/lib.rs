//! Bayesian influence estimation for small differentiable models.
//!
//! The crate answers "which training examples move this query loss?" by two
//! routes that check each other:
//!
//! * a sampling route: SGLD chains explore a localized posterior around a
//!   trained checkpoint ([`sgld`]) and influence is read off as the negative
//!   covariance between per-example train losses and query observables
//!   ([`estimators`]);
//! * a curvature route: classical influence functions with dampening,
//!   second-order correction terms, exact Gaussian results for quadratic
//!   losses, and a slow-but-sure reweighting oracle ([`oracle`]).
//!
//! The [`lds`] module scores any influence matrix against actual retraining
//! runs (linear datamodeling), and [`artifact`] gives every matrix and trace
//! a hashed on-disk form so experiment runs are byte-reproducible.

pub mod artifact;
pub mod error;
pub mod estimators;
pub mod labels;
pub mod lds;
pub mod model;
pub mod oracle;
pub mod sgld;

pub use error::{Error, ErrorClass, Result};

/// Matrix types in the public API come from this nalgebra version.
pub use nalgebra;

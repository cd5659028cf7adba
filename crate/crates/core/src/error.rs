//! Error taxonomy shared by every module in the crate.
//!
//! Variants are grouped into four classes so that callers (notably the CLI)
//! can map failures onto distinct exit codes: input validation, numerical
//! divergence, artifact or shape incompatibility, and plain I/O.

use thiserror::Error;

/// Coarse classification used for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Divergence,
    Incompatibility,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dense Hessian requested for d = {dim} parameters, cap is {cap}")]
    HessianCapExceeded { dim: usize, cap: usize },

    #[error("chain {chain} diverged at step {step}: max |coordinate| = {max_abs:.3e}")]
    Divergence { chain: usize, step: usize, max_abs: f64 },

    #[error("retraining diverged at step {step}: loss = {loss:.3e}")]
    RetrainDiverged { step: usize, loss: f64 },

    #[error("optimizer did not reach gradient norm {tol:.1e} in {iters} iterations (final {grad_norm:.3e})")]
    DidNotConverge { iters: usize, tol: f64, grad_norm: f64 },

    #[error("matrix is not positive definite: smallest eigenvalue estimate {min_eigenvalue:.6e}")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("covariance requires at least 2 draws, got {got}")]
    InsufficientDraws { got: usize },

    #[error("unsupported decomposition: {0}")]
    UnsupportedDecomposition(String),

    #[error("operation not supported for this model: {0}")]
    UnsupportedModel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label mismatch: first divergent label at position {position}: {left} vs {right}")]
    LabelMismatch {
        position: usize,
        left: String,
        right: String,
    },

    #[error("malformed artifact {path}: {reason}")]
    MalformedArtifact { path: String, reason: String },

    #[error("artifact {path} failed integrity check: manifest records {expected}, file hashes to {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            DimensionMismatch { .. }
            | NonFinite(_)
            | InvalidParameter { .. }
            | HessianCapExceeded { .. }
            | NotPositiveDefinite { .. }
            | InsufficientDraws { .. } => ErrorClass::Validation,
            Divergence { .. } | RetrainDiverged { .. } | DidNotConverge { .. } => {
                ErrorClass::Divergence
            }
            UnsupportedDecomposition(_)
            | UnsupportedModel(_)
            | ShapeMismatch(_)
            | LabelMismatch { .. }
            | MalformedArtifact { .. }
            | HashMismatch { .. } => ErrorClass::Incompatibility,
            Io(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

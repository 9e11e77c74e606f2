//! Error type shared by every engine module.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CmfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite value at scenario {scenario}, particle {particle}, step {step}")]
    NumericalBlowup {
        scenario: usize,
        particle: usize,
        step: usize,
    },

    #[error("likelihood degeneracy at scenario {scenario}, step {step}: {detail}")]
    Degeneracy {
        scenario: usize,
        step: usize,
        detail: String,
    },

    #[error("derivative field {field} disagrees with finite differences (relative mismatch {mismatch:.3e})")]
    DerivativeMismatch { field: String, mismatch: f64 },

    #[error("law flow is stale: fixed-point residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    StaleLaw { residual: f64, tol: f64 },

    #[error("ensemble was resampled; pathwise identities required here are invalid")]
    ResampledEnsemble,
}

pub type Result<T> = std::result::Result<T, CmfError>;

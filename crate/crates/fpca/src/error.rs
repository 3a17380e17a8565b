//! Shared error type for the whole pipeline.

use thiserror::Error;

/// Errors surfaced by estimation, geometry, and data handling.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or grid shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Two tangent vectors refer to different base points.
    #[error("tangent vectors have different base points")]
    BaseMismatch,

    /// A matrix that must be skew-symmetric is not.
    #[error("matrix is not skew-symmetric (max asymmetry {0:.3e})")]
    NotSkew(f64),

    /// A matrix that must have orthonormal columns is too far from any.
    #[error("matrix is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    /// A linear system is singular or too ill-conditioned to solve.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// A matrix that must be positive definite is not.
    #[error("matrix is not positive definite: {0}")]
    Indefinite(String),

    /// Basis construction parameters are unusable.
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    /// An input value lies outside the supported domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An input collection that must be nonempty is empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// Too few observations to carry out an estimation step.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A caller-facing precondition was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Model selection finished without a single usable candidate.
    #[error("no candidate model converged and scored")]
    NoModel,

    /// Filesystem failure while reading or writing data.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

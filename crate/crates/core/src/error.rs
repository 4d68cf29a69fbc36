//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tangent basis lost rank at t = {t} (column {column} collapsed)")]
    TangentCollapse { t: f64, column: usize },

    #[error("run diverged at t = {t}: {what}")]
    Divergence { t: f64, what: String },

    #[error("covariance lost positive semidefiniteness at t = {t} (lambda_min = {lambda_min:e})")]
    CovarianceIndefinite { t: f64, lambda_min: f64 },

    #[error("not detectable: {0}")]
    NotDetectable(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("eigen solver failed: {0}")]
    EigenFailure(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

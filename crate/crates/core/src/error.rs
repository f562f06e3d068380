use std::io;

use thiserror::Error;

/// Errors produced by the estimators, simulators and their I/O surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("row program for row {row} infeasible at mu = {mu}; smallest feasible mu found is {min_feasible_mu}")]
    Infeasible {
        row: usize,
        mu: f64,
        min_feasible_mu: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl Into<String>, found: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        found: found.into(),
    }
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

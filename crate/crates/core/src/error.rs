use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("SPD solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("non-finite value produced at step {step}")]
    NonFinite { step: usize },

    #[error("flower step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (solver, divergence, NaN) rather
    /// than by user input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SolverFailure { .. }
            | Error::TrainingDiverged { .. }
            | Error::NonFinite { .. }
            | Error::NotPositiveDefinite(_) => true,
            Error::AtStep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Each variant maps onto one of the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown ion species {0:?}")]
    UnknownSpecies(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: &'static str, right: &'static str },

    #[error("non-thermal or saturated sideband data: red/blue ratio {0} is not below 1")]
    NonThermal(f64),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("fit did not converge after {starts} starts (best chi2 {best_chi2:.6e}): {reason}")]
    NonConvergence {
        starts: usize,
        best_chi2: f64,
        best_params: Vec<f64>,
        reason: String,
    },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 2 validation, 3 fit non-convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } | Error::Degenerate(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid_input",
            Error::UnknownSpecies(_) => "unknown_species",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonThermal(_) => "non_thermal",
            Error::Degenerate(_) => "degenerate_fit",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value is missing, inconsistent or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("unlabeled score estimation failed: {0}")]
    Estimation(String),

    /// Iterative search did not reach its target.
    #[error("no convergence after {iterations} iterations (best achieved {best})")]
    Convergence { iterations: usize, best: f64 },

    /// Data file problem, located by (1-based) line number when known.
    #[error("{path}: line {line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Whether the error originates from configuration rather than data.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

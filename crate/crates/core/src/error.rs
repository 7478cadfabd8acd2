use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("prox solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("round {round}, step {step}: {source}")]
    Step {
        round: u64,
        step: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),
}

impl FedError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        FedError::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches round/step context to a failure raised inside a local loop.
    pub(crate) fn at_step(self, round: u64, step: usize) -> Self {
        FedError::Step {
            round,
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

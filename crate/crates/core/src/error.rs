use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid process or experiment parameters (n = 0, unknown strategy, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A formula was evaluated outside the region where it is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("pool for round {round} is exhausted")]
    PoolExhausted { round: usize },

    #[error("enumeration exceeded the node budget of {budget}")]
    NodeBudget { budget: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

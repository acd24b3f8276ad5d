use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data (shapes, ids, non-finite values).
    #[error("input error: {0}")]
    Input(String),

    /// A hyperparameter outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The kernel spectrum cannot support the requested sample size.
    #[error("spectral error: {0}")]
    Spectral(String),

    /// Non-finite gradients or losses.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A model was used before it reached the required state (e.g. uncalibrated threshold).
    #[error("state error: {0}")]
    State(String),

    /// Training diverged or failed to reach its quality floor.
    #[error("training failure: {message}")]
    Training {
        message: String,
        /// Tail of the loss history at the point of failure.
        loss_tail: Vec<f64>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

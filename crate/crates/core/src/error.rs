use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("augmentation policy error: {0}")]
    Policy(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("batch-norm routing error: {0}")]
    Routing(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("attack specification error: {0}")]
    AttackSpec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

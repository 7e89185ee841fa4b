use std::path::PathBuf;

use m2rnn_core::CoreError;
use m2rnn_tp::TpError;
use m2rnn_train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tp(#[from] TpError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: divergence counts as a failed run, everything else
    /// as a configuration or I/O problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::Diverged { .. }) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

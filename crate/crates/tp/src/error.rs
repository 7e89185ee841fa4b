use m2rnn_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpError {
    #[error("protocol error in round {round}: {msg}")]
    Protocol { round: usize, msg: String },
    #[error("round {round} ({op}) is missing shards {missing:?}, which already left the bus")]
    MissingParticipant {
        round: usize,
        op: String,
        missing: Vec<usize>,
    },
    #[error("sharding config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = TpError> = std::result::Result<T, E>;

use streetgaze_core::ComparisonRecord;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session `{0}` not found")]
    SessionNotFound(String),

    #[error("pair `{0}` not found for this session")]
    PairNotFound(String),

    #[error("session `{0}` has been served all of its pairs")]
    NoMorePairs(String),

    #[error("pair `{pair_id}` was already answered")]
    Conflict {
        pair_id: String,
        existing: Box<ComparisonRecord>,
    },

    #[error("session `{0}` no longer accepts data")]
    SessionClosed(String),

    #[error("batch of {size} samples exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("no unseen image pair left for session `{0}`")]
    Exhausted(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt event log: {0}")]
    Corrupt(String),

    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] streetgaze_core::Error),

    /// Raised by an injected fault; the service refuses further work until
    /// it is reopened from disk.
    #[error("service halted by an injected crash")]
    Crashed,
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

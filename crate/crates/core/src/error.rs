use thiserror::Error;

/// Failure classes shared by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("corrupt file at byte {offset}: {reason}")]
    CorruptFile { offset: u64, reason: String },

    #[error("incompatible format: {0}")]
    Incompatible(String),

    #[error("checkpoint type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: String, found: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training fault at step {step}: {reason}")]
    TrainingFault { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

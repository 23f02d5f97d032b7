use std::io;

/// Errors raised by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite or impossible value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged (non-finite loss or gradient).
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    /// A stored digest does not match the recomputed one.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Malformed on-disk data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

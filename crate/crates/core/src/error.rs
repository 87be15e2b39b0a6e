use std::path::PathBuf;

/// Errors surfaced by the library. Precondition violations (caller bugs such
/// as shape mismatches on internal math) panic instead; `Error` covers the
/// recoverable conditions: bad data, bad config, numeric failure, misuse of
/// stateful sessions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {path}: {msg} (byte offset {offset})")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("session misuse: {0}")]
    Session(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

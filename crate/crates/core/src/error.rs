use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing input: shapes, ranges, config values, missing files.
    #[error("configuration error: {0}")]
    Config(String),
    /// An internal invariant was broken (non-finite values, impossible state).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

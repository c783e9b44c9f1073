//! Error taxonomy shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters, or config keys.
    #[error("config error: {0}")]
    Config(String),
    /// Operation invoked in the wrong state (backward before forward,
    /// uninitialized parameters or running statistics, ...).
    #[error("state error: {0}")]
    State(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed file content (tensor dumps, images, manifests).
    #[error("format error: {0}")]
    Format(String),
    /// Checkpoint does not match the architecture it claims to hold.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// Process exit code for the CLI: 2 usage/config, 3 numeric, 4 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::State(_) => 2,
            Error::Numeric(_) => 3,
            Error::CheckpointMismatch(_) => 4,
        }
    }
}

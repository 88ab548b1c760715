//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An input matrix or scalar violated a precondition (non-finite entries,
    /// out-of-range parameter, empty where data is required).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A task dataset is degenerate (no samples, or duplicated samples with
    /// conflicting labels).
    #[error("invalid task: {0}")]
    InvalidTask(String),

    /// The class-incremental protocol was violated (e.g. class overlap
    /// between sessions, unknown label).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An operation was called on a model in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// A binary file failed validation. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An experiment configuration violated an invariant.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for data errors, 3 for config
    /// errors, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: bad caller
/// input (1), malformed data (2), numerical failure (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The requested estimator cannot produce a value on this input
    /// (e.g. no background voxels); the message names an alternative.
    #[error("estimation unavailable: {0}")]
    EstimationUnavailable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

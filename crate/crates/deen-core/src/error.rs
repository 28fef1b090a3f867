use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum DeenError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A configuration value is out of range or internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A batch or evaluation pool does not satisfy the protocol's preconditions.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Input data is missing or malformed.
    #[error("data error: {0}")]
    Data(String),
    /// A NaN/Inf or other numeric failure was detected.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file does not follow its documented byte layout.
    #[error("format error: {0}")]
    Format(String),
}

impl DeenError {
    /// Process exit code for the CLI: 2 config/contract, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            DeenError::Dim(_)
            | DeenError::Config(_)
            | DeenError::Contract(_)
            | DeenError::Protocol(_) => 2,
            DeenError::Data(_) | DeenError::Io(_) | DeenError::Format(_) => 3,
            DeenError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, DeenError>;

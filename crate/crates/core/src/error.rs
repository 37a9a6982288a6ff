use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants map onto the CLI exit codes: configuration errors exit with 2,
/// budget and contract errors with 3, and I/O errors with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Contract(_) | Error::Budget(_) | Error::State(_) | Error::Diverged(_) => 3,
            Error::Io(_) | Error::Serde(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

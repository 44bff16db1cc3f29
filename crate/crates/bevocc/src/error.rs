use thiserror::Error;

/// Error type shared by every layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// A non-finite value was produced or consumed where finiteness is required.
    #[error("numerics error: {0}")]
    Numerics(String),
    /// An input value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerics(_) => 3,
            _ => 1,
        }
    }
}

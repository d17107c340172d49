use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's preconditions.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A caller-visible contract was violated (bad config, bad hook usage).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A numerical failure (divergence, NaN loss).
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

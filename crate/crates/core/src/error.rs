use thiserror::Error;

/// Errors produced by the engine.
#[derive(Error, Debug)]
pub enum SeidError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An architecture configuration cannot be built.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SeidError>;

impl SeidError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SeidError::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        SeidError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        SeidError::Config(msg.into())
    }
}

//! Crate-wide error type.

/// Errors surfaced by configuration, data, model, and training code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Error {
        Error::Data(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Error {
        Error::Checkpoint(msg.into())
    }
}

use thiserror::Error;

/// Errors raised by the public operations of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or resolutions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input values violate a documented precondition (non-finite entries,
    /// values outside a required range, wrong channel counts, ...).
    #[error("invalid input: {0}")]
    Validation(String),

    /// A linear system is too ill-conditioned to solve even after ridge
    /// stabilization.
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A file could not be parsed; the message names the offending field.
    #[error("parse error: {0}")]
    Parse(String),

    /// Bad run configuration (empty data source, negative weight, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

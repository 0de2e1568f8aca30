use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel mismatch in {context}: expected {expected}, found {found}")]
    ChannelMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unexpected weight tensor `{0}`")]
    UnexpectedWeight(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidNetwork(msg.into())
    }
}

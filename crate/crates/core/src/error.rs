use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at epoch {epoch} step {step}\n{diagnostics}")]
    NonFinite {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StcError>;

#[derive(Debug, Error)]
pub enum StcError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed tensor file at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StcError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        StcError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            StcError::Config(_) | StcError::Argument(_) => 2,
            StcError::Io(_) | StcError::Format { .. } => 3,
            StcError::Shape { .. } | StcError::State(_) => 1,
        }
    }
}

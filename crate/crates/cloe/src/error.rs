//! Crate-wide error type with the process exit codes used by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloeError {
    /// Tensor shape disagreement, invalid geometry, bad labels.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or unparseable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values, failed gradient checks, degenerate geometry.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed container files.
    #[error("container format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An availability mask with no modality present.
    #[error("availability mask selects no modality")]
    EmptyMask,
}

impl CloeError {
    /// CLI exit code: 0 ok, 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CloeError::Shape(_) | CloeError::Config(_) | CloeError::EmptyMask => 2,
            CloeError::Numerical(_) => 3,
            CloeError::Format(_) | CloeError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CloeError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> CloeError {
    CloeError::Shape(msg.into())
}

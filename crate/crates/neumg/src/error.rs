//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("index out of range: {what} = {got}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("unsupported extension: {0}")]
    UnsupportedExtension(String),

    #[error("invalid mass: {0}")]
    InvalidMass(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("record does not match model family: expected patch size {expected}, got {got}")]
    WrongFamily { expected: usize, got: usize },

    #[error("no model for patch size {patch_size}")]
    MissingModel { patch_size: usize },

    #[error("training failed at epoch {epoch}: {msg}")]
    TrainingFailure { epoch: usize, msg: String },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

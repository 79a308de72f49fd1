//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the inference / backtracking pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("coordinate out of range: {0}")]
    Coordinate(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing weight blob `{0}`")]
    MissingBlob(String),

    #[error("graph validation failed: {0}")]
    Graph(String),

    #[error("evidence set is empty and fallback is `abort`")]
    EmptyEvidence,

    #[error("unsupported layer kind for this operation: {0}")]
    Unsupported(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("ingestion error at row {row}, column {col}: {msg}")]
    Ingestion { row: usize, col: usize, msg: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("training diverged at batch {batch}: non-finite {term}")]
    Diverged { batch: usize, term: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

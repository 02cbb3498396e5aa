use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems with dataset contents, files, or generation parameters.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .path.display())]
    MissingFile { path: PathBuf },
    #[error("row count mismatch: view {view} has {actual} rows, expected {expected}")]
    RowMismatch {
        view: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-numeric cell {cell:?} in {} at line {line}, column {column}", .path.display())]
    NonNumeric {
        path: PathBuf,
        line: usize,
        column: usize,
        cell: String,
    },
    #[error("ragged row in {} at line {line}: {actual} columns, expected {expected}", .path.display())]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        actual: usize,
    },
    #[error("bad label {cell:?} in {} at line {line}", .path.display())]
    BadLabel {
        path: PathBuf,
        line: usize,
        cell: String,
    },
    #[error("manifest {}: {message}", .path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Problems reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint at byte offset {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("checkpoint tensor {name}: {message}")]
    Tensor { name: String, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("{phase} diverged at epoch {epoch}: non-finite {term} (breakdown: {breakdown})")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        term: String,
        breakdown: LossBreakdown,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            actual,
        }
    }
}

//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors produced by any operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{what} requires a batch of at least 2 rows, got {got}")]
    BatchTooSmall { what: &'static str, got: usize },

    #[error("column {col} has zero L2 norm; correlation is undefined without the norm guard")]
    ZeroNormColumn { col: usize },

    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        classes: usize,
    },

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("shift matrix is singular (|det| = {det:.3e} <= 1e-6)")]
    SingularShift { det: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for config/usage problems, 2 for
    /// runtime and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

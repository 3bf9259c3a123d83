//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Broad classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("matrix is not positive definite (failing pivot at index {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate leverage at sample {index} (1 - S_ii = {margin:e})")]
    DegenerateLeverage { index: usize, margin: f64 },

    #[error("label error: {0}")]
    Label(String),

    #[error("cannot stratify: class {class} has {count} sample(s)")]
    Stratification { class: usize, count: usize },

    #[error("task registry: {0}")]
    Registry(String),

    #[error("pipeline error in category '{category}': {detail}")]
    Pipeline { category: String, detail: String },

    #[error("task '{task}' failed: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("chunk {index} failed: {source}")]
    Chunk {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("options key error: {0}")]
    Key(String),

    #[error("model state: {0}")]
    State(String),

    #[error(
        "memory budget exceeded: need a {required}x{required} in-core matrix, budget allows {available}x{available}"
    )]
    Budget { required: usize, available: usize },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version { path: PathBuf, found: u64, expected: u64 },

    #[error("corrupt file {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("parse error at {path}:{line}: {detail}")]
    Parse { path: PathBuf, line: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Registry(_) | Error::Parameter(_) => ErrorClass::Config,
            Error::Numeric(_)
            | Error::NotPositiveDefinite { .. }
            | Error::DegenerateLeverage { .. }
            | Error::Budget { .. } => ErrorClass::Numeric,
            Error::Task { source, .. } | Error::Chunk { source, .. } => source.class(),
            Error::Pipeline { .. } | Error::ContractViolation(_) | Error::Key(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}

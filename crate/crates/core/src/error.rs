use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Backward reached a node whose output was tombstoned during a
    /// discard-mode forward pass.
    #[error("activation not retained: node {node} ({op}) was discarded")]
    NotRetained { node: usize, op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    Truncation { len: usize, max: usize },

    #[error("empty passage: {0}")]
    EmptyPassage(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{}", parse_message(.file, *.line, .field.as_deref(), .message))]
    Parse {
        file: PathBuf,
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_message(file: &std::path::Path, line: usize, field: Option<&str>, message: &str) -> String {
    match field {
        Some(f) => format!("parse error in {}:{line} (field `{f}`): {message}", file.display()),
        None => format!("parse error in {}:{line}: {message}", file.display()),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Index { .. } => "index",
            Error::NotRetained { .. } => "not_retained",
            Error::NotScalar(_) => "not_scalar",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Truncation { .. } => "truncation",
            Error::EmptyPassage(_) => "empty_passage",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

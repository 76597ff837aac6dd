use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("config error: invalid field(s) {}", .0.join(", "))]
    Config(Vec<String>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u64, expected: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(fields: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Error::Config(fields.into_iter().map(Into::into).collect())
    }
}

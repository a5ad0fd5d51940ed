use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("registry: {0}")]
    Registry(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("format: {0}")]
    Format(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Registry(_) => "registry",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(std::io::Error::other(e.to_string()))
        } else {
            Error::Format(e.to_string())
        }
    }
}

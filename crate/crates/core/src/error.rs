use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path}")]
    Version { path: PathBuf, found: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch in {path}: expected {expected:?}, found {found:?}")]
    DimMismatch {
        path: PathBuf,
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }
}

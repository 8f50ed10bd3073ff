use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (shapes, ranges, ordering).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("{op}: {value} is outside the valid range {range}")]
    Range {
        op: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFinite(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupted file {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },

    #[error("missing checkpoint for {0}")]
    MissingCheckpoint(String),

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
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

    /// True for failures caused by the file system rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::MissingCheckpoint(_))
    }
}

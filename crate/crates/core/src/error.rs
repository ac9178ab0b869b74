use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the exit code the command-line front end maps
/// them to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    BadVersion { what: &'static str, found: u32, expected: u32 },

    #[error("truncated {what}: {detail}")]
    Truncated { what: &'static str, detail: String },

    #[error("checksum mismatch in {what}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { what: &'static str, stored: u32, computed: u32 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("pilot evaluation failed at boundary {boundary}: {reason}")]
    Pilot { boundary: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit code: 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Routing(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } | Error::Numerical(_) => 4,
            Error::Shape { .. }
            | Error::InvalidTensor(_)
            | Error::NotScalar(_)
            | Error::UnknownParam(_)
            | Error::DuplicateParam(_) => 4,
            Error::BadMagic { .. }
            | Error::BadVersion { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Format { .. }
            | Error::MissingData(_)
            | Error::Pilot { .. }
            | Error::Io { .. } => 3,
        }
    }
}

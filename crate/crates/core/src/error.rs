use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("row {row} is not a probability distribution: {detail}")]
    Distribution { row: usize, detail: String },

    #[error("label {label} out of range for {num_classes} classes ({context})")]
    LabelRange {
        label: usize,
        num_classes: usize,
        context: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("truncated blob {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("blob {path} has {found} bytes, expected {expected}")]
    Oversized {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("refusing to overwrite existing output in {0}")]
    AlreadyExists(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (configuration, files,
    /// arguments) rather than by a failure while computing.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Io(_))
    }
}

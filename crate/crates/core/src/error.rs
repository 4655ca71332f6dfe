use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {frame_length}")]
    InputTooShort { len: usize, frame_length: usize },

    #[error("window/hop violates reconstruction condition")]
    ReconstructionCondition,

    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("undefined SNR: reference has zero energy")]
    UndefinedSnr,

    #[error("wav {path}: {field}: {message}")]
    Wav {
        path: PathBuf,
        field: &'static str,
        message: String,
    },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("tensor id {0} is not on the tape")]
    NotOnTape(usize),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint: truncated, expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: malformed {0}")]
    MalformedCheckpoint(String),

    #[error("config mismatch: {field} is {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("no usable audio in {0}")]
    NoUsableAudio(PathBuf),

    #[error("results directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: &'static str },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

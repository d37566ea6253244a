use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or slicing a dataset container.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("byte length mismatch for {}: expected {expected}, found {actual}", path.display())]
    ByteLength { path: PathBuf, expected: u64, actual: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("trial too short: need at least {needed} samples, have {have}")]
    TrialTooShort { needed: usize, have: usize },
    #[error("clip length {t_seconds}s does not fit the trial ({reason})")]
    BadClipLength { t_seconds: f64, reason: String },
    #[error("rating {rating} outside scale [{min}, {max}]")]
    RatingOutOfScale { rating: f64, min: f64, max: f64 },
    #[error("insufficient clips: requested {requested}, available {available}")]
    InsufficientClips { requested: usize, available: usize },
    #[error("mini-batch subjects must differ (got {0} twice)")]
    IdenticalSubjects(String),
    #[error("unknown {kind} `{id}`")]
    Unknown { kind: &'static str, id: String },
    #[error("clip has zero power; SNR undefined")]
    ZeroPower,
    #[error("non-finite sample in {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
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

    /// Machine-readable category, printed by the CLI next to the message.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Divergence(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Shape { .. } | Error::InvalidArgument(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dataset(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}

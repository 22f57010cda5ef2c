use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown corpus format `{0}`")]
    UnknownFormat(String),

    #[error("label-set violation: {0}")]
    LabelSet(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("length budget too small: {0}")]
    Budget(String),

    #[error("task R example has no oracle item")]
    MissingItem,

    #[error("sequence of {len} tokens exceeds max positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing model for stage {0}")]
    MissingModel(String),

    #[error("length mismatch: {0} hypotheses vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnknownFormat(_) => "unknown_format",
            Error::LabelSet(_) => "label_set",
            Error::Vocabulary(_) => "vocabulary",
            Error::Budget(_) => "budget",
            Error::MissingItem => "missing_item",
            Error::TooLong { .. } => "too_long",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::MissingModel(_) => "missing_model",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

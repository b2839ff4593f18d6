use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid dialog {id}: {reason}")]
    InvalidDialog { id: String, reason: String },

    #[error("empty query")]
    EmptyQuery,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("not unit-normalized (norm {0})")]
    NotUnitNormalized(f64),

    #[error("empty index")]
    EmptyIndex,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated index")]
    TruncatedIndex,

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("index is frozen")]
    Frozen,

    #[error("truncated checkpoint")]
    TruncatedCheckpoint,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("region shape error in image {image_id}: {reason}")]
    RegionShape { image_id: String, reason: String },

    #[error("unknown image: {0}")]
    UnknownImage(String),

    #[error("unknown tag: {0}")]
    UnknownTag(String),

    #[error("invalid cost matrix: {0}")]
    InvalidCostMatrix(String),

    #[error("oracle size limit: n = {0} exceeds 8")]
    OracleSizeLimit(usize),

    #[error("not enough training pairs: need at least 2, got {0}")]
    NotEnoughPairs(usize),

    #[error("empty response in {0}")]
    EmptyResponse(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("length mismatch: {hypotheses} hypotheses vs {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },

    #[error("index out of range: {what} = {index} (limit {limit})")]
    OutOfRange { what: &'static str, index: usize, limit: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

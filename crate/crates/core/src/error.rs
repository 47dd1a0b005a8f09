//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CvrError>;

#[derive(Debug, Error)]
pub enum CvrError {
    #[error("vector norm {norm:e} is below the normalization floor")]
    NormUnderflow { norm: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("softmax received a fully masked input")]
    AllMasked,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("step indices are not strictly increasing in video {video_id:?}")]
    NonMonotoneSteps { video_id: String },

    #[error("missing embedding for {id:?} in {store} store")]
    MissingEmbedding { id: String, store: &'static str },

    #[error("missing caption embedding for clip {0:?}")]
    MissingCaptionEmbedding(String),

    #[error("query {query_id:?}: need {needed} candidates, only {available} available")]
    InsufficientCandidates {
        query_id: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid query {query_id:?}: {reason}")]
    InvalidQuery { query_id: String, reason: String },

    #[error("history length {len} exceeds the context window {max}")]
    HistoryTooLong { len: usize, max: usize },

    #[error("forward tape does not match the parameters: {0}")]
    TapeMismatch(String),

    #[error("bad dimensions: {0}")]
    BadDims(String),

    #[error("query {0:?} has no context clip but the scoring mode needs one")]
    MissingContext(String),

    #[error("scoring mode {0} needs a trained model that was not supplied")]
    MissingModel(&'static str),

    #[error("grid search received an empty grid")]
    EmptyGrid,

    #[error("invalid world spec: {0}")]
    BadSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CvrError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        CvrError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

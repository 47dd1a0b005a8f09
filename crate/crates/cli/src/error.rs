use cvr_core::CvrError;
use serde::Serialize;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            code: self.code(),
            message: self.to_string(),
        })
        .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

impl From<CvrError> for CliError {
    fn from(e: CvrError) -> Self {
        use CvrError::*;
        let msg = e.to_string();
        match e {
            InvalidConfig(_) | BadSpec(_) | MissingModel(_) | EmptyGrid => CliError::Usage(msg),
            Io(_) | Json(_) | Schema(_) | BadMagic { .. } | UnsupportedVersion(_) | TruncatedFile(_) | DuplicateId(_)
            | DimMismatch { .. } | NonMonotoneSteps { .. } | MissingEmbedding { .. } | MissingCaptionEmbedding(_)
            | InsufficientCandidates { .. } | InvalidQuery { .. } | HistoryTooLong { .. } | MissingContext(_) => {
                CliError::Data(msg)
            }
            NormUnderflow { .. } | ShapeMismatch { .. } | AllMasked | TapeMismatch(_) | BadDims(_) => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

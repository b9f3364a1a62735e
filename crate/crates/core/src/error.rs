use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structurally invalid document or record. `location` is a line number,
    /// a field path, or both.
    #[error("{location}: {message}")]
    Malformed { location: String, message: String },

    #[error("{location}: duplicate id `{id}`")]
    DuplicateId { location: String, id: String },

    #[error("{location}: reference to unknown id `{id}`")]
    DanglingReference { location: String, id: String },

    #[error("{location}: {message}")]
    InvalidSchema { location: String, message: String },

    #[error("{context}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: record `{id}` is a zero vector")]
    ZeroVector { line: usize, id: String },

    #[error("{context}: non-finite value")]
    NonFinite { context: String },

    #[error("image `{image_id}` has no similarity for query `{query_id}`")]
    MissingQuery { image_id: String, query_id: String },

    #[error("{location}: unknown query id `{query_id}`")]
    UnknownQuery { location: String, query_id: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no users left after filtering: {before} users in, threshold {threshold}")]
    EmptyCohort { before: usize, threshold: usize },

    #[error("only one outcome class present in {0}")]
    SingleClass(String),

    #[error("information matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("standard errors are only defined for unpenalized fits (lambda = {lambda})")]
    PenalizedFit { lambda: f64 },

    #[error("model did not converge{}", if *.separation { " (separation detected)" } else { "" })]
    NotConverged { separation: bool },

    #[error("run {run}: no two-class test split after {attempts} redraws")]
    RedrawLimit { run: usize, attempts: usize },

    #[error("both samples have zero variance")]
    ZeroVariance,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Malformed {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True when the error stems from bad input data or configuration rather
    /// than a numerical failure inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Singular { .. } | Error::NotConverged { .. } | Error::Numerical(_)
        )
    }
}

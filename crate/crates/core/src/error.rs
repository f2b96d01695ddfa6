//! One error type for the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("operands belong to different differentiation graphs")]
    GraphMismatch,

    #[error("graph already consumed by backward; build a new one or retain it explicitly")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss tensor is not attached to a differentiation graph")]
    DetachedLoss,

    #[error("finite differences require a scalar-valued function, got shape {0:?}")]
    NonScalarFunction(Vec<usize>),

    #[error("step size must be positive, got {0}")]
    BadStepSize(f64),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("codebook needs at least 2 entries, got {0}")]
    EmptyCodebook(usize),

    #[error("code index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("transport instance is unbalanced: supply {supply} vs demand {demand}")]
    Unbalanced { supply: f64, demand: f64 },

    #[error("negative value in {what}: {value}")]
    Negative { what: &'static str, value: f64 },

    #[error("sinkhorn regularization must be positive, got {0}")]
    BadEps(f64),

    #[error("assignment oracle limited to n <= 8, got {0}")]
    OracleTooLarge(usize),

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("embedding table is missing token(s): {0}")]
    MissingToken(String),

    #[error("malformed {what} at line {line}: {details}")]
    Parse {
        what: &'static str,
        line: usize,
        details: String,
    },

    #[error("while computing {term}: {source}")]
    Term {
        term: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint mismatch for {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing entry {0}")]
    CheckpointMissing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("internal solver failure: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the loss term or pipeline stage
    /// that produced it, so NaN aborts name their source.
    pub fn in_term(self, term: impl Into<String>) -> Error {
        Error::Term {
            term: term.into(),
            source: Box::new(self),
        }
    }

    /// True for errors that should abort a run with the "numerical" exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Term { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

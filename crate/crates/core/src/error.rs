use thiserror::Error;

/// Errors produced by the nclkit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has (near-)zero Euclidean norm")]
    ZeroVector(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("duplicate instance id {0}")]
    DuplicateId(usize),

    #[error("invalid marginal prior: {0}")]
    InvalidPrior(String),

    #[error("degenerate matrix: {axis} {index} has no strictly positive entry")]
    DegenerateMatrix { axis: &'static str, index: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("query {0} has no ground-truth item")]
    MissingGroundTruth(usize),

    #[error("ground-truth item {item} for query {query} is out of range (n = {n_items})")]
    GroundTruthOutOfRange { query: usize, item: usize, n_items: usize },

    #[error("batch too small: need at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("modality mismatch: queue holds {expected:?}, batch is {actual:?}")]
    ModalityMismatch {
        expected: crate::embed::Modality,
        actual: crate::embed::Modality,
    },

    #[error("row {row} is not unit norm (norm = {norm})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("query queue is empty")]
    EmptyQueue,

    #[error("malformed EMB1 data: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numbers themselves (overflow, divergence,
    /// degenerate scaling problems) rather than malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::DegenerateMatrix { .. } | Error::Diverged { .. }
        )
    }
}

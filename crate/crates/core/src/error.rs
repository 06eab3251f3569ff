use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape/rotation size conflict: {0}")]
    SizeConflict(String),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("SVD did not converge ({rows}x{cols}, max |entry| {max_abs:e}, finite: {finite})")]
    SvdFailure {
        rows: usize,
        cols: usize,
        max_abs: f64,
        finite: bool,
    },

    #[error("sequence longer than trained encoding ({len} > {capacity})")]
    SequenceTooLong { len: usize, capacity: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

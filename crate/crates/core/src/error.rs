use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular: pivot {pivot} fell below the relative threshold")]
    SingularMatrix { pivot: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquareMatrix { rows: usize, cols: usize },

    #[error("non-finite entry at position {0}")]
    NonFinite(usize),

    #[error("cannot average an empty cluster")]
    EmptyCluster,

    #[error("index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported polynomial degree {0}")]
    InvalidDegree(usize),

    #[error("coefficient is not positive ({value}) at {point:?}")]
    NonPositiveCoefficient { point: Vec<f64>, value: f64 },

    #[error("no rows with {patch_size} stored entries")]
    NoPatchesFound { patch_size: usize },

    #[error("patch {patch} could not be factored: {source}")]
    PatchFactor {
        patch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cluster {cluster} representative could not be factored: {source}")]
    ClusterFactor {
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("database budget {budget} is smaller than the {partitions} boundary partitions")]
    BudgetTooSmall { budget: usize, partitions: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

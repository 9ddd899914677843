use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcnError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing value at row {row}, column {column:?} (use --drop-incomplete-rows to skip such rows)")]
    MissingValue { row: usize, column: String },

    #[error("label column {0:?} not found in header")]
    LabelColumnNotFound(String),

    #[error("table is empty")]
    EmptyTable,

    #[error("k_folds = {k_folds} out of range for n = {n} (need 2 <= k_folds <= n)")]
    FoldsOutOfRange { n: usize, k_folds: usize },

    #[error("invalid regularization: {0}")]
    InvalidRegularization(String),

    #[error("SVD did not converge")]
    SvdNonConvergence,

    #[error("dimension mismatch: expected length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("truncation keeps singular value {index} = {value:e}, which is numerically zero")]
    ZeroSingularValueKept { index: usize, value: f64 },

    #[error("index {index} out of range for {len} variables")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix of order {n} exceeds materialization limit {limit}")]
    MaterializationLimit { n: usize, limit: usize },

    #[error("variable {index} is perfectly resolved (R_ii = {r_ii}); its neighborhood regression is ill-posed")]
    PerfectResolution { index: usize, r_ii: f64 },

    #[error("variable {index} has a vanishing residual scale ({d:e}); asymmetric scaling is undefined")]
    VanishingResidual { index: usize, d: f64 },

    #[error("singular neighborhood system for variable {0}; use a positive ridge parameter")]
    SingularSystem(usize),

    #[error("spectral embedding requires an SVD-rank truncation, got {0}")]
    EmbeddingNeedsTruncation(String),

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("k = {k} exceeds {available} training samples")]
    TooManyNeighbors { k: usize, available: usize },

    #[error("parameter grid is empty")]
    EmptyGrid,

    #[error("bad cache file: {0}")]
    BadCache(String),

    #[error("self-check failed: max error {error:e} exceeds {tolerance:e}")]
    SelfCheckFailed { error: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, PcnError>;

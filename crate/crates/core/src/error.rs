use thiserror::Error;

/// Errors raised across the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: ({row}, {col}) in a {n}x{m} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n: usize,
        m: usize,
    },

    #[error("duplicate entry at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },

    #[error("negative count {count} at ({row}, {col})")]
    NegativeCount { row: usize, col: usize, count: i64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty observation set")]
    EmptyObservations,

    #[error("rank {rank} out of range for a {n}x{m} matrix")]
    RankOutOfRange { rank: usize, n: usize, m: usize },

    #[error("SVD did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("unsorted input: {0}")]
    Unsorted(String),

    #[error("unknown identifier: {0}")]
    UnknownIdentifier(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::DuplicateEntry { .. } => "duplicate-entry",
            Error::NegativeCount { .. } => "negative-count",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::EmptyObservations => "empty-observations",
            Error::RankOutOfRange { .. } => "rank-out-of-range",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Unsorted(_) => "unsorted",
            Error::UnknownIdentifier(_) => "unknown-identifier",
            Error::Format { .. } => "malformed-file",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

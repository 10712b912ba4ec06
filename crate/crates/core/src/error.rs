use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset is not labeled: {0}")]
    Unlabeled(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid ranking: {0}")]
    Ranking(#[from] RankingError),

    #[error("degenerate correlation: {0}")]
    DegenerateCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Validation failures for a ranking file or payload.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankingError {
    #[error("unknown trajectory id {0}")]
    UnknownId(u64),
    #[error("duplicate trajectory id {0}")]
    DuplicateId(u64),
    #[error("stale ranking: produced for dataset {found}, expected {expected}")]
    StaleRanking { expected: String, found: String },
    #[error("ranking is for environment {found}, dataset is {expected}")]
    EnvMismatch { expected: String, found: String },
    #[error("trajectory id {0} missing from ranking")]
    MissingId(u64),
    #[error("ranking needs at least 2 trajectories, got {0}")]
    TooFew(usize),
    #[error("unsupported ranking file version {0}")]
    Version(u32),
}

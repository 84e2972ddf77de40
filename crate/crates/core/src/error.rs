use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("rank {k} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { k: usize, rows: usize, cols: usize },

    #[error("no observed entries")]
    NoObservations,

    #[error("near-zero pivot {value:e} at clustered cell ({row}, {col})")]
    NearZeroPivot { row: usize, col: usize, value: f64 },

    #[error("cross-validation fold {fold} has no cells")]
    EmptyFold { fold: usize },

    #[error("zero-variance truth: r2 is undefined")]
    ZeroVariance,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("grid point {index} ({label}) failed: {source}")]
    GridPoint {
        index: usize,
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

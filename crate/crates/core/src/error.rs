use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-numeric cell at row {row}, column '{column}': {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("zero-fill corruption in silo {silo}: {detail}")]
    Corruption { silo: usize, detail: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("stale forward trace: trace built for params version {trace}, params at {params}")]
    StaleTrace { trace: u64, params: u64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for data problems,
    /// 4 for training divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Io { .. }
            | Error::Data(_)
            | Error::NonNumericCell { .. }
            | Error::InsufficientData(_)
            | Error::DegenerateLabels(_)
            | Error::DegenerateVariance(_)
            | Error::Corruption { .. } => 3,
            Error::Divergence(_) => 4,
            Error::Shape { .. } | Error::DegenerateEmbedding(_) | Error::StaleTrace { .. } | Error::Wire(_) => 1,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid trait grade: {0}")]
    InvalidTrait(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("aggregation window {window} of customer {customer} has zero total spend")]
    EmptyWindow { customer: String, window: usize },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("cache does not match the model: {0}")]
    Cache(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("degenerate trajectory: net displacement norm {norm:e} below 1e-9")]
    DegenerateTrajectory { norm: f64 },
    #[error("missing artifact {0}; run the producing stage first")]
    StageOrder(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Divergence { .. } | Error::DegenerateTrajectory { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("numerical singularity in {context} (reciprocal condition {rcond:.3e})")]
    NumericalSingularity { context: &'static str, rcond: f64 },

    #[error("covariance is not positive semidefinite in {0}")]
    NotPositiveDefinite(&'static str),

    #[error("insufficient history: need {needed}, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("singular design matrix: collinear columns {columns:?}")]
    SingularDesign { columns: Vec<usize> },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("duplicate key (asset `{asset}`, date {date})")]
    DuplicateKey { asset: String, date: String },

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NumericalSingularity { .. } => "numerical_singularity",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::InsufficientHistory { .. } => "insufficient_history",
            Error::SingularDesign { .. } => "singular_design",
            Error::Parse { .. } => "parse",
            Error::MissingColumn { .. } => "missing_column",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

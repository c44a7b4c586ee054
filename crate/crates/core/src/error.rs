use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("input channel {0} has zero sample variance")]
    ZeroVariance(usize),

    /// An inverse-gamma rate fell below the sampling floor, which means the
    /// quadratic form (or residual) it was built from is numerically zero.
    #[error("degenerate inverse-gamma rate {rate:e}")]
    DegenerateRate { rate: f64 },

    #[error("factorization failed after jitter retry: {0}")]
    Factorization(String),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("system generator gave up after {0} attempts")]
    RegenerationLimit(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
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
    /// True for failures of the numerical machinery (as opposed to bad
    /// arguments or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateRate { .. } | Error::Factorization(_) => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

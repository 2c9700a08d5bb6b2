use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParamDomain(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    /// A series did not reach the requested tail bound within the term cap.
    #[error("series did not converge within {max_terms} terms (tail bound {bound:e})")]
    Accuracy { max_terms: usize, bound: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fitting failed: {0}")]
    Fitting(String),

    #[error("non-finite information entry at ({0}, {1})")]
    Information(usize, usize),

    #[error("stratum h={0} has zero total weight")]
    StratumEmpty(u8),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_row(self, row: usize) -> Error {
        match self {
            Error::Row { .. } => self,
            other => Error::Row {
                row,
                source: Box::new(other),
            },
        }
    }
}

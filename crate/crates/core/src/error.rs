use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// A symmetric factorization failed even after the single jitter retry.
    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    Conditioning { pivot: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("estimation failed at iteration {iteration}: {message}")]
    Estimation { iteration: usize, message: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("inference error: {0}")]
    Inference(String),

    /// Input file problem; `row` is the 1-based data row (header excluded).
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("simulation study failed: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ (Error::Estimation { .. } | Error::AtIteration { .. }) => e,
            other => Error::AtIteration {
                iteration,
                source: Box::new(other),
            },
        }
    }
}

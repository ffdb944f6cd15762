use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The parent graph has a cycle, or refers to nodes that do not exist.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file or string could not be parsed into the expected shape.
    #[error("format error: {0}")]
    Format(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Evidence has zero probability under the parameters it was evaluated at.
    #[error("evidence has zero support")]
    ZeroSupport,

    #[error("likelihood underflowed to zero for evidence with positive support")]
    Underflow,

    #[error("matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("learner failed: {0}")]
    Learner(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from malformed input rather than from the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Structure(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_)
        )
    }
}

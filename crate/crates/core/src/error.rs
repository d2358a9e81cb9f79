use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The time grid is too coarse for the advective CFL bound.
    #[error("CFL violation: {steps} time steps given, at least {required} required")]
    CflViolation { steps: usize, required: usize },

    #[error("density became negative at time step {step} (min {min:e})")]
    PositivityLoss { step: usize, min: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("confinement split unavailable: {0}")]
    SplitUnavailable(String),

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    /// Cells `(step, cell)` that received fewer samples than required.
    #[error("{} (step, cell) bins below the sample threshold", .cells.len())]
    SparseCells { cells: Vec<(usize, usize)> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

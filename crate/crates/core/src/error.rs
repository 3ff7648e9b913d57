use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {context}{}", step_suffix(*.step))]
    Numerical { context: String, step: Option<usize> },

    #[error("direction vector has zero norm")]
    DegenerateDirection,

    #[error("batch size {requested} is invalid for a dataset of {available} samples")]
    BatchSize { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid probe budget: {0}")]
    Budget(String),

    #[error("need at least {needed} traces, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("protocol failure: {0}")]
    Protocol(String),

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(t) => format!(" at step {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            step: None,
        }
    }

    /// Attach an iteration index to a numerical error, leaving other kinds alone.
    pub fn at_step(self, t: usize) -> Self {
        match self {
            Error::Numerical { context, .. } => Error::Numerical {
                context,
                step: Some(t),
            },
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

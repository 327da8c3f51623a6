use thiserror::Error;

/// Pipeline stage that produced a failure; carried by [`Error::Numerical`] so
/// that callers can report where identification broke down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generation,
    Simulation,
    Noise,
    Estimation,
    OrderSelection,
    RankConstrained,
    Factorization,
    ShiftLeastSquares,
    Metrics,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Generation => "generation",
            Stage::Simulation => "simulation",
            Stage::Noise => "noise",
            Stage::Estimation => "estimation",
            Stage::OrderSelection => "order-selection",
            Stage::RankConstrained => "rank-constrained",
            Stage::Factorization => "factorization",
            Stage::ShiftLeastSquares => "shift-least-squares",
            Stage::Metrics => "metrics",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{stage} failed: {message}")]
    Numerical { stage: Stage, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn numerical(stage: Stage, message: impl Into<String>) -> Self {
        Error::Numerical { stage, message: message.into() }
    }

    pub fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Stage of a numerical failure, if this is one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Numerical { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

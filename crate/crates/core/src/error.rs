use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The map produced NaN or an infinity. `iteration` is the trajectory
    /// step at which it happened, when known.
    #[error("non-finite state{}", .iteration.map(|k| format!(" at iteration {k}")).unwrap_or_default())]
    NonFiniteState { iteration: Option<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance {index} is not symmetric positive definite")]
    DegenerateCovariance { index: usize },

    #[error("M-step system for component {component} is singular")]
    SingularSystem { component: usize },

    #[error("KL divergence is infinite (q is zero where p has mass at index {index})")]
    InfiniteDivergence { index: usize },

    #[error("not enough usable ratios to estimate a rate (found {usable}, need 2)")]
    InsufficientData { usable: usize },

    #[error("lattice search needs {needed} evaluations, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Some trials of a sweep failed; the rest of the results are still valid.
    #[error("{failed} of {total} trials failed")]
    TrialsFailed { failed: usize, total: usize },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::SingularSystem { .. }
                | Error::InfiniteDivergence { .. }
                | Error::InsufficientData { .. }
                | Error::BudgetExceeded { .. }
                | Error::TrialsFailed { .. }
        )
    }
}

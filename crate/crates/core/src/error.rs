use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A PHY rate that the active profile does not support.
    #[error("rate {rate_mbps} Mb/s is not in the profile's supported rate set")]
    InvalidRate { rate_mbps: f64 },

    /// A structurally invalid input; `path` names the offending field.
    #[error("invalid value at `{path}`: {reason}")]
    Validation { path: String, reason: String },

    /// An ordered-index formula was called on stations that are not sorted
    /// by ascending transmission duration.
    #[error("stations are not ordered by ascending transmission duration (index {index})")]
    Unordered { index: usize },

    /// The requested contention window cannot be realised.
    #[error("infeasible attempt probability: {reason}")]
    Infeasible { reason: String },

    #[error("solver did not converge after {iterations} iterations (best residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best_iterate: Vec<f64>,
    },

    #[error("solver restarts disagree (max relative difference {max_rel_diff:e})")]
    NonUnique { max_rel_diff: f64 },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn validation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

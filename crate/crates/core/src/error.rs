//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building inputs or estimating.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Structurally invalid input (mismatched lengths, empty data, bad flags).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A moment evaluation produced a non-finite value.
    #[error("non-finite moment value for descriptor {descriptor} at row {row}")]
    NonFiniteMoment { descriptor: String, row: usize },

    /// An estimand that conditions on a group needs that group to be non-empty.
    #[error("estimand undefined: {0}")]
    EstimandUndefined(String),

    /// An outcome required by the requested estimator is missing.
    #[error("outcome is missing for unit {unit}, required by {context}")]
    MissingOutcome { unit: usize, context: String },

    /// A moment column is constant in the source group.
    #[error("moment column {column} is constant in the source group (zero variance); drop or replace it")]
    ConstantColumn { column: usize },

    /// The balancing problem has no solution (target outside the source hull).
    #[error("balance constraints are infeasible: {0}")]
    Infeasible(String),

    /// A weighting/variance step was handed a solution that did not converge.
    #[error("balance solution did not converge (status: {status})")]
    NotConverged { status: String },

    /// The logistic MLE does not exist (complete or quasi-complete separation).
    #[error("logistic MLE does not exist: groups are separated in feature space")]
    Separation,

    /// A fitted propensity is too close to 0 or 1 for the requested weights.
    #[error("overlap violation: fitted propensity {value} at unit {unit}")]
    OverlapViolation { unit: usize, value: f64 },

    /// A design matrix is rank deficient.
    #[error("design matrix is rank deficient; collinear column(s): {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    /// A matrix that must be inverted is numerically singular.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: String },

    /// CSV or numeric parsing failure.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Every replication of a simulation study failed.
    #[error("simulation study failed: {0}")]
    StudyFailed(String),
}

impl Error {
    /// Whether the error reports a mathematical non-existence condition
    /// (infeasible balance, separated logistic fit, missing overlap) rather
    /// than a malformed input.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            Error::Infeasible(_)
                | Error::Separation
                | Error::OverlapViolation { .. }
                | Error::NotConverged { .. }
        )
    }
}

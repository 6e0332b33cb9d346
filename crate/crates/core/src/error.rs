use thiserror::Error;

/// Errors produced by the fingerprinting toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A raw value or schema declaration does not fit the declared domains.
    #[error("schema violation: {0}")]
    Schema(String),

    /// Primary-key uniqueness or record shape is broken.
    #[error("integrity violation: {0}")]
    Integrity(String),

    /// An operation was called with inputs outside its contract.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Two databases that must share a key set do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The cumulative budget cannot accommodate the requested insertion budget.
    #[error(
        "privacy budget infeasible: right-hand side {rhs:.6} <= 0; \
         largest feasible insertion epsilon is {max_feasible_epsilon:.6}"
    )]
    BudgetInfeasible { rhs: f64, max_feasible_epsilon: f64 },

    #[error("no internal id passed the noisy density threshold within {trials} trials")]
    NonTermination { trials: usize },

    #[error("instance too large for exact evaluation: {0}")]
    Size(String),

    /// A closed form is undefined for the given inputs (zero denominator).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate knots: {0}")]
    DegenerateKnots(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("global balance is infeasible; worst feature `{feature}` (index {index})")]
    Infeasible { feature: String, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("overlap violation: {0}")]
    Overlap(String),

    #[error("degenerate stratum: {0}")]
    DegenerateStratum(String),

    #[error("bootstrap failed: {dropped} of {total} replicates infeasible")]
    Bootstrap { dropped: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("volatility matrix is numerically singular at t={t} (reciprocal condition {rcond:e})")]
    SingularMatrix { t: f64, rcond: f64 },

    #[error("backward solution blew up at t={t}: |value| = {value:e} exceeds {bound:e}")]
    BlowUp { t: f64, value: f64, bound: f64 },

    #[error("non-finite value encountered at t={t}")]
    NonFinite { t: f64 },

    #[error("non-positive discriminant {0:e} in steady-state equation")]
    Discriminant(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("exponent alpha={alpha} is not admissible: requires alpha* < alpha < 1, alpha != 0 with alpha*={alpha_star}")]
    Admissibility { alpha: f64, alpha_star: f64 },

    #[error("solution violates its existence branch at t={t}: {detail}")]
    BranchViolation { t: f64, detail: String },

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite payoff evaluation at S = {s}: {what}")]
    NonFinite { s: f64, what: String },
    #[error("quadrature did not converge: estimate {estimate}, last change {change}")]
    Quadrature { estimate: f64, change: f64 },
    #[error("degenerate band at S = {s}, t = {t}: y*_S = 0")]
    DegenerateBand { s: f64, t: f64 },
    #[error("grid resolution: {0}")]
    Resolution(String),
    #[error("solver failure: {0}")]
    Numeric(String),
    #[error("internal consistency: {0}")]
    Consistency(String),
    #[error("impossible state: {0}")]
    Impossible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

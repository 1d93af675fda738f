use thiserror::Error;

/// Errors raised anywhere in the pricing, calibration and data pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate frequency {re}{im:+}i: {what} below floor")]
    DegenerateFrequency { re: f64, im: f64, what: &'static str },

    #[error("contour violation: {0}")]
    ContourViolation(String),

    #[error("quadrature did not decay below tolerance before truncation at {truncation}")]
    QuadratureDivergence { truncation: f64 },

    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    #[error("VIX {vix} is infeasible: squared level below m(1 - theta) = {floor}")]
    InfeasibleVix { vix: f64, floor: f64 },

    #[error("price {price} outside no-arbitrage bounds: {bound} bound {limit}")]
    OutOfBounds { price: f64, bound: Bound, limit: f64 },

    #[error("parse error on line {line}, column '{column}': {message}")]
    Parse { line: u64, column: String, message: String },

    #[error("no strike with both call and put quotes")]
    NoStraddle,

    #[error("fast scale unresolved: {steps_per_year} steps per year, need at least {required}")]
    UnresolvedFastScale { steps_per_year: f64, required: f64 },

    #[error("pricing failed for quote {index}: {source}")]
    PricingFailure {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

/// Which no-arbitrage bound a price violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Lower => write!(f, "lower"),
            Bound::Upper => write!(f, "upper"),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

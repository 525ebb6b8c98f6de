use thiserror::Error;

/// Errors produced by the MDP, geometry and dynamics routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row not stochastic: {field} row {row} sums to {sum}")]
    RowNotStochastic {
        field: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("negative entry in {field} at index {index}: {value}")]
    NegativeEntry {
        field: &'static str,
        index: usize,
        value: f64,
    },
    #[error("discount out of range: gamma = {0} must lie in (0, 1)")]
    DiscountOutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular linear system: {0}")]
    Singular(&'static str),
    #[error("zero state marginal at state {state}; positivity assumption violated")]
    ZeroMarginal { state: usize },
    #[error("entry {index} = {value} is outside the domain of the potential")]
    Domain { index: usize, value: f64 },
    #[error("step leaves the positive orthant at coordinate {coordinate}")]
    BoundaryExit { coordinate: usize },
    #[error("reduced Hessian is numerically singular")]
    SingularReducedHessian,
    #[error("enumeration of {0} deterministic policies exceeds the scale guard")]
    ScaleGuard(f64),
    #[error("regularized optimum not found: {0}")]
    NoConvergence(String),
    #[error("insufficient data for rate fit: {available} usable records, need {required}")]
    InsufficientData { available: usize, required: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit code used by the command line front end: 1 for usage and
    /// validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Singular(_)
            | Error::SingularReducedHessian
            | Error::BoundaryExit { .. }
            | Error::NoConvergence(_)
            | Error::InsufficientData { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

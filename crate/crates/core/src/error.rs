use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the engine.
///
/// The type is `Clone` because cached boundary computations store their
/// outcome, failures included.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("initial weights sum to {sum}, which exceeds 1")]
    WeightSumExceeded { sum: f64 },
    #[error("transition row {row} sums to {sum}, which exceeds 1")]
    RowSumExceeded { row: usize, sum: f64 },
    #[error("negative or non-finite weight in {what}")]
    NegativeWeight { what: String },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("transition matrix has a non-zero diagonal entry in row {row}")]
    NonZeroDiagonal { row: usize },
    #[error("exhaustion weights sum to {sum}, expected 1")]
    ExhaustionWeightSum { sum: f64 },
    #[error("hypothesis {index} is not active")]
    InactiveNode { index: usize },
    #[error("information weight q={q} must lie in (0,1)")]
    InvalidWeight { q: f64 },
    #[error("argument out of domain: {what}")]
    OutOfDomain { what: String },
    #[error("spent increment at stage {stage} is not positive; information fractions must increase strictly")]
    SpentIncrementNonpositive { stage: usize },
    #[error("numerical procedure did not converge: {what}")]
    ConvergenceFailure { what: String },
    #[error("nominal levels are not monotone in gamma near {gamma}; refusing to invert")]
    SpendingMonotonicityViolation { gamma: f64 },
    /// `hypothesis` is a 0-based index; messages show it 1-based.
    #[error("missing observation for hypothesis {}", hypothesis + 1)]
    MissingObservation { hypothesis: usize },
    #[error("stage {stage} exceeds the planned number of stages {max}")]
    StageOverrun { stage: usize, max: usize },
    #[error("hypothesis {} is not collecting data", hypothesis + 1)]
    NotCollecting { hypothesis: usize },
    #[error("invalid {which} start vector at component {component}")]
    InvalidStartVector { which: &'static str, component: usize },
    #[error("correlation matrix is not positive semi-definite")]
    NotPsd,
    #[error("parse error{}: {message}", location(*line, *column))]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

fn location(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors that describe bad user input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::ConvergenceFailure { .. } | Error::Io(_) | Error::SpendingMonotonicityViolation { .. }
        )
    }
}

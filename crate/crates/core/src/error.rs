use thiserror::Error;

use crate::likelihood::FitResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("vector of length {len} is not m(m-1)/2 for any m")]
    BadLength { len: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("not a correlation matrix: {0}")]
    NotCorrelation(String),

    #[error("fixed-point inverse did not converge in {iterations} iterations (last step {last_step:e})")]
    MaxIterations { iterations: usize, last_step: f64 },

    #[error("not a permutation of 0..{dim}")]
    BadPermutation { dim: usize },

    #[error("covariate `{name}` missing in group `{group}`")]
    MissingCovariate { name: String, group: String },

    #[error("group `{0}` has no observations")]
    EmptyGroup(String),

    #[error("dataset has no groups")]
    EmptyDataset,

    #[error("covariate `{0}` is categorical in some records and numeric in others")]
    InconsistentTypes(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("Fisher information is singular; the model is not identified")]
    SingularInformation,

    #[error("fit did not converge after {} iterations", .0.iterations)]
    FitNotConverged(Box<FitResult>),

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("likelihood ratio statistic {0} is negative; one of the fits has not converged")]
    NegativeStatistic(f64),

    #[error("standard error of coefficient {index} is zero or undefined")]
    DegenerateSE { index: usize },

    #[error("invalid simulation design: {0}")]
    BadDesign(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

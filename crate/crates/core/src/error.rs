use thiserror::Error;

/// Errors produced by model construction, discretization, inference and estimation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no stationary covariance: drift matrix is not Hurwitz (max real eigenvalue {0:e})")]
    NotHurwitz(f64),

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("duplicate node ({0}, {1})")]
    DuplicateNode(usize, usize),

    #[error("unsupported discretization: {0}")]
    UnsupportedScheme(String),

    #[error("TME covariance indefinite at state {state:?} (min eigenvalue {min_eigenvalue:e})")]
    TmeIndefinite { state: Vec<f64>, min_eigenvalue: f64 },

    #[error("non-finite state at t = {0}")]
    PriorBlowUp(f64),

    #[error("degenerate innovation (S = {0:e})")]
    DegenerateInnovation(f64),

    #[error("filter diverged at step {0}")]
    FilterDiverged(usize),

    #[error("filter numerical failure at step {0}")]
    FilterNumerical(usize),

    #[error("particle degeneracy at step {0}")]
    ParticleDegeneracy(usize),

    #[error("backward degeneracy at step {0}")]
    BackwardDegeneracy(usize),

    #[error("covariance not PD (increase jitter): {0}")]
    NotPositiveDefinite(String),

    #[error("transition covariance not PD at step {0}")]
    TransitionNotPd(usize),

    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

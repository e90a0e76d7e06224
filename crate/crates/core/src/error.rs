use thiserror::Error;

/// Errors raised while building models or evaluating likelihood, prediction
/// and MSE quantities.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EblupError {
    #[error("sampling variance phi[{index}] = {value} is not positive")]
    NonPositivePhi { index: usize, value: f64 },

    #[error("design matrix X has numerical rank {rank} but {p} columns")]
    RankDeficientX { rank: usize, p: usize },

    #[error("need more observations than fixed effects (n = {n}, p = {p})")]
    TooFewObservations { n: usize, p: usize },

    #[error("group {group} has no observations")]
    EmptyGroup { group: usize },

    #[error("random-effect block Z_{index} is identically zero")]
    ZeroBlock { index: usize },

    #[error("model needs at least one random-effect block")]
    NoRandomEffects,

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("X' Sigma^-1 X is singular")]
    SingularGram,

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("sigma[{index}] = {value} lies outside the parameter space")]
    OutsideParameterSpace { index: usize, value: f64 },

    #[error("component index {index} out of range (s = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid balanced design: {0}")]
    InvalidDesign(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{failures} of {replicates} replicates failed")]
    StudyFailed { failures: usize, replicates: usize },
}

pub type Result<T> = std::result::Result<T, EblupError>;

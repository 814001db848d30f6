use thiserror::Error;

/// Errors raised by the CMDP toolkit and the train/test pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid CMDP: {0}")]
    InvalidCmdp(String),

    #[error("scale {scale} too small: margin {worst} at (s={state}, a={action}) leaves [-1, 1]")]
    ScaleTooSmall {
        scale: f64,
        worst: f64,
        state: usize,
        action: usize,
    },

    #[error("singular linear system in policy evaluation")]
    SingularSystem,

    #[error("linear program is infeasible (phase-one residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex iteration limit {0} reached")]
    IterationLimit(usize),

    #[error("no simultaneously feasible policy found: best margin {best_margin} < xi {xi} after {iterations} iterations")]
    FeasibilityFailure {
        best_margin: f64,
        xi: f64,
        iterations: usize,
    },

    #[error("training did not converge after {doublings} doublings (last statistic {statistic}, N = {n})")]
    TrainingDidNotConverge {
        doublings: usize,
        statistic: f64,
        n: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty policy-value set")]
    EmptyPolicyValueSet,

    #[error("missing true values in episode {0}")]
    MissingTrueValues(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

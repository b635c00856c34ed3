use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("Hurst parameter must lie in (0, 1), got {0}")]
    InvalidHurst(f64),

    #[error("covariance size must be at least 1")]
    EmptyCovariance,

    #[error("covariance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("covariance matrix is not symmetric: entry ({row},{col}) differs from its transpose by {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("covariance matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("unsupported quadrature order {0}; expected 1..=16")]
    UnsupportedOrder(usize),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("level mismatch: cannot project level {from} onto level {to}")]
    LevelMismatch { from: usize, to: usize },

    #[error("lattice with {paths} paths exceeds the cap of {cap}")]
    LatticeTooLarge { paths: u128, cap: u128 },

    #[error("depth mismatch: {0}")]
    DepthMismatch(String),

    #[error("non-finite value at stage {stage}, node {node}")]
    NonFiniteValue { stage: usize, node: usize },

    #[error("control value {value} at stage {stage}, node {node} leaves the control set")]
    OutOfControlSet { stage: usize, node: usize, value: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid driver: {0}")]
    InvalidDriver(String),

    #[error("terminal condition violated: {0}")]
    TerminalConditionViolated(String),

    #[error("duality mismatch: state route {state_route:e}, adjoint route {adjoint_route:e}")]
    DualityMismatch { state_route: f64, adjoint_route: f64 },

    #[error("no descent after {halvings} step halvings at iteration {iteration}")]
    NoDescent { iteration: usize, halvings: usize },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("invalid LQ specification: {0}")]
    InvalidSpec(String),

    #[error("closed form requires horizon 1, got {0}")]
    WrongHorizon(usize),
}

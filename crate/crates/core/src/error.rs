use alloc::string::String;

/// Errors produced by the solver core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical blow-up at path {path}, step {step}: {what}")]
    NumericalBlowup {
        path: usize,
        step: usize,
        what: String,
    },

    #[error("Newton solve did not converge at t = {t}, x = {x:?}: residual {residual:e}")]
    ConvergenceFailure {
        t: f64,
        x: alloc::vec::Vec<f64>,
        residual: f64,
    },

    #[error("control update failed at {count} points; first offenders (path, step): {points:?}")]
    UpdateFailed {
        count: usize,
        points: alloc::vec::Vec<(usize, usize)>,
        first: alloc::boxed::Box<Error>,
    },

    #[error("step size backtracking exhausted at iteration {iteration}: tau = {tau:e}, J increase {increase:e}")]
    Stalled {
        iteration: usize,
        tau: f64,
        increase: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

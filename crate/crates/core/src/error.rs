use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operands live on different spaces (dim {left} vs {right})")]
    SpaceMismatch { left: usize, right: usize },

    #[error("steady state is not unique: null space dimension {dim}")]
    DegenerateSteadyState { dim: usize },

    #[error("integrator failed at t = {t:e} s (step {step:e} s, {steps} steps): {reason}")]
    Integrator {
        t: f64,
        step: f64,
        steps: usize,
        reason: String,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("at x = {x}: {source}")]
    AtX { x: f64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

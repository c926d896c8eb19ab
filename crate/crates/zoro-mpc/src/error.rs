use thiserror::Error;

/// Errors produced by the solver stack and the scenario loader.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate discretization: dt must be positive")]
    DegenerateDiscretization,

    #[error("PSD violation: {0}")]
    PsdViolation(String),

    #[error("singular collision gradient: robot center within {0} m of obstacle center")]
    SingularGradient(f64),

    #[error("QP infeasible{0}")]
    QpInfeasible(String),

    #[error("QP solver hit max iterations ({0})")]
    QpMaxIterations(usize),

    #[error("QP Hessian is not positive definite")]
    QpNotPositiveDefinite,

    #[error("solver did not converge within {iterations} outer iterations (last step {step_norm:.3e}, backoff change {backoff_change:.3e})")]
    NoConvergence {
        iterations: usize,
        step_norm: f64,
        backoff_change: f64,
    },

    #[error("empty reference trajectory")]
    EmptyReference,

    #[error("too few samples for noise estimation: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse { .. } => 2,
            Error::NoConvergence { .. } => 3,
            _ => 1,
        }
    }
}

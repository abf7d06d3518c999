use thiserror::Error;

/// Errors raised by model construction, fitting and decomposition.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("plan syntax error at position {position}: {message}")]
    PlanSyntax { position: usize, message: String },

    #[error("degenerate posterior: every unnormalized weight is zero")]
    DegeneratePosterior,

    #[error("conditioning on a null event: {0} has zero posterior mass")]
    NullEvent(String),

    #[error("backend failure for assignment {assignment}: {message}")]
    Backend { assignment: String, message: String },

    #[error("Newton iteration did not converge (gradient norm {grad_norm:.3e} after {iterations} steps)")]
    NoConvergence { grad_norm: f64, iterations: usize },

    #[error("negative Hessian is not positive definite at the mode (saddle point)")]
    Saddle,

    #[error("missing covariate `{0}`")]
    MissingCovariate(String),

    #[error("{path} (line {line}): {message}")]
    Document { path: String, line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

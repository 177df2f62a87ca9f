use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("target formation is not in the edge space (residual {residual:.3e})")]
    NotInEdgeSpace { residual: f64 },

    #[error("relation is not monotone: {0}")]
    NonMonotone(String),

    #[error("domain too small: supremum is attained at the boundary {boundary}")]
    DomainTooSmall { boundary: f64 },

    #[error("steady-state solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("constraint violated: {0}")]
    ConstraintViolation(String),

    #[error("sensitivity positivity conditions violated (min eigenvalue {min_eigenvalue:.3e})")]
    SingularSensitivity { min_eigenvalue: f64 },

    #[error("blow-up at t = {t}")]
    BlowUp { t: f64 },

    #[error("experiment did not converge within t_max = {t_max}")]
    ExperimentNotConverged { t_max: f64 },

    #[error("measurements inconsistent: {0}")]
    InconsistentMeasurements(String),

    #[error("pair violates the LTI estimator hypothesis: {0}")]
    LtiHypothesis(String),

    #[error("step size too large: gain on edge {edge} became {value}")]
    NonPositiveGain { edge: usize, value: f64 },

    #[error("schedule exhausted; last distance {last_distance:.6}")]
    ScheduleExhausted { last_distance: f64 },

    #[error("scenario error at `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGraph(_) => "invalid_graph",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotInEdgeSpace { .. } => "not_in_edge_space",
            Error::NonMonotone(_) => "non_monotone",
            Error::DomainTooSmall { .. } => "domain_too_small",
            Error::NonConvergence { .. } => "non_convergence",
            Error::ConstraintViolation(_) => "constraint_violation",
            Error::SingularSensitivity { .. } => "singular_sensitivity",
            Error::BlowUp { .. } => "blow_up",
            Error::ExperimentNotConverged { .. } => "experiment_not_converged",
            Error::InconsistentMeasurements(_) => "inconsistent_measurements",
            Error::LtiHypothesis(_) => "lti_hypothesis",
            Error::NonPositiveGain { .. } => "non_positive_gain",
            Error::ScheduleExhausted { .. } => "schedule_exhausted",
            Error::Scenario { .. } => "scenario",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

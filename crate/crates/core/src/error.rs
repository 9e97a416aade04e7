use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model document: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("state dimension mismatch: model has {expected} joints, got q[{q}] and qd[{qd}]")]
    Dimension { expected: usize, q: usize, qd: usize },
}

impl ModelError {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Failures of task-space quantities that are undefined at the current state.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("Euler-angle representation singular: pitch {pitch} within 1e-6 of ±π/2")]
    RepresentationSingularity { pitch: f64 },
    #[error("task-space inertia ill-conditioned (condition number {condition:e})")]
    NearSingular { condition: f64 },
    #[error("manipulability {mu:e} too small for a defined gradient")]
    SingularGradient { mu: f64 },
    #[error("invalid gains: {0}")]
    Gains(String),
}

use thiserror::Error;

/// Errors raised by the simulator and its learners.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("unknown device {0}")]
    UnknownDevice(usize),

    #[error("unknown channel {0}")]
    UnknownChannel(usize),

    #[error("collision notified while the primary user is idle")]
    CollisionWhileIdle,

    #[error("residual observation must be positive, got {0}")]
    NonPositiveResidual(f64),

    #[error("replication traces differ in length ({expected} vs {found})")]
    LengthMismatch { expected: usize, found: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}

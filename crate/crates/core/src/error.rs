use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An oracle returned a non-finite value.
    #[error("domain violation: {0}")]
    DomainViolation(String),

    /// The problem does not provide a derivative the caller asked for.
    #[error("missing capability: {0}")]
    MissingCapability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("oracle audit failed: {0}")]
    Audit(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

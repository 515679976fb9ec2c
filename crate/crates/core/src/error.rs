use thiserror::Error;

/// Errors raised by the perception routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty scene")]
    EmptyScene,

    #[error("could not place object {object} within {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },

    #[error("config `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{stage} stage failed: {cause}")]
    Stage { stage: &'static str, cause: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            cause: Box::new(self),
        }
    }

    /// Prefixes the parameter name of an [`Error::InvalidParameter`] with a
    /// config section.
    pub(crate) fn in_section(self, section: &str) -> Self {
        match self {
            Error::InvalidParameter { name, reason } => Error::Config {
                path: format!("{section}.{name}"),
                message: reason,
            },
            other => other,
        }
    }
}

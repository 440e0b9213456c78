use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Every invalid field of a config, reported together.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("load error in {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("barrier poisoned: {0}")]
    Poisoned(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load { path: path.into(), reason: reason.into() }
    }

    /// True for errors caused by user input or input files rather than a
    /// failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidConfig(_) | Error::Load { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Codec(_) => "codec",
            Error::Protocol(_) => "protocol",
            Error::Config(_) | Error::InvalidConfig(_) => "config",
            Error::Load { .. } => "load",
            Error::Numeric(_) => "numeric",
            Error::Poisoned(_) => "poisoned",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

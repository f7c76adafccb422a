use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at timestep {timestep}")]
    NonFinite { op: &'static str, timestep: usize },

    #[error("layout parse error: {0}")]
    Parse(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("denoiser capability error: {0}")]
    Capability(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("bad magic in weight file (expected \"CDIF\")")]
    BadMagic,

    #[error("unsupported weight file version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("malformed weight file: {0}")]
    Malformed(String),

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// Whether the error stems from user input (configs, layouts, files on
    /// disk) rather than from a failure while computing.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse(_)
                | Error::Validation(_)
                | Error::UnknownToken(_)
                | Error::Capability(_)
                | Error::Image { .. }
                | Error::BadMagic
                | Error::Version { .. }
                | Error::Truncated(_)
                | Error::Malformed(_)
        )
    }
}

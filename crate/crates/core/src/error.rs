use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch in {path}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },

    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("malformed file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("cannot L2-normalize a zero vector")]
    ZeroNorm,

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for config key `{key}`: {msg}")]
    BadConfigValue { key: String, msg: String },

    #[error("architecture mismatch in `{field}`: checkpoint has {checkpoint}, config has {config}")]
    Architecture {
        field: String,
        checkpoint: String,
        config: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by a config file that violates the key schema.
    pub fn is_schema_violation(&self) -> bool {
        matches!(self, Error::UnknownKey(_) | Error::BadConfigValue { .. })
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

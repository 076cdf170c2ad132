use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("unsupported PPM variant `{0}`")]
    UnsupportedPpm(String),

    #[error("malformed PPM header: {0}")]
    MalformedPpm(String),

    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    TruncatedPpm { expected: usize, found: usize },

    #[error("bad checkpoint magic")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("truncated checkpoint")]
    TruncatedCheckpoint,

    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParameter(String),

    #[error("missing parameter `{0}` in checkpoint")]
    MissingParameter(String),

    #[error("malformed tensor fixture: {0}")]
    Fixture(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by bad numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("objective is not deterministic: {first} vs {second} on repeated evaluation")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("no domain-constrained derangement exists for fake domains {0:?}")]
    NoValidDerangement(Vec<u32>),

    #[error("batch is missing the {0} class")]
    MissingClass(&'static str),

    #[error("manifest cannot satisfy batch composition: {0}")]
    Composition(String),

    #[error("malformed manifest at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint does not match model config at tensor `{name}`: {detail}")]
    ConfigMismatch { name: String, detail: String },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("metrics need both classes present: {0}")]
    SingleClass(String),

    #[error("numeric failure at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by configuration or protocol setup rather than
    /// by a numeric or IO failure at runtime.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::UnknownKey(_)
                | Error::ProtocolViolation(_)
                | Error::ConfigMismatch { .. }
                | Error::Composition(_)
                | Error::Manifest { .. }
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("non-finite value produced by {op} at node #{node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite gradient flowing out of {op} at node #{node}")]
    NonFiniteGradient { op: &'static str, node: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint blob length mismatch: manifest expects {expected} values, blob holds {actual}")]
    CheckpointLength { expected: usize, actual: usize },

    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error("malformed checkpoint manifest {path}: {msg}")]
    CheckpointManifest { path: PathBuf, msg: String },

    #[error("checkpoint has no observation moments")]
    MissingMoments,

    #[error("IDX file {path}: bad magic number, expected {expected} ({expected:#010x}) got {actual} ({actual:#010x})")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("IDX item count mismatch: {images} images vs {labels} labels")]
    IdxCount { images: usize, labels: usize },

    #[error("IDX file {path} truncated: expected {expected} bytes of payload, found {actual}")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("environment {env}: {msg}")]
    Env { env: &'static str, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

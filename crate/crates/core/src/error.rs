use std::path::PathBuf;

use haug_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },

    /// `location` is `line N` for files or `--set` for overrides.
    #[error("config {location}: key `{key}`: {msg}")]
    Config { location: String, key: String, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("augmentation pipeline: {0}")]
    Pipeline(String),

    #[error("stage {stage} pipeline has no {kind} step to embed")]
    KindNotInPipeline { stage: usize, kind: &'static str },

    #[error("view resolution {got}x{got} does not match the configured {expected}x{expected}")]
    Resolution { expected: usize, got: usize },

    #[error("checkpoint does not start with the HAUG magic")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("checkpoint was written for a different architecture (config digest differs)")]
    DigestMismatch,

    #[error("parameter `{name}` has shape {found:?} in the checkpoint but {expected:?} in the model")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("parameter `{0}` is missing from the checkpoint")]
    MissingParam(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; snapshot written to {}", snapshot.display())]
    NonFiniteLoss { epoch: usize, step: usize, snapshot: PathBuf },

    #[error("probe: {0}")]
    Probe(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

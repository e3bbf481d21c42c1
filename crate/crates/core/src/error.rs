use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (det = {det:e}, trace = {trace:e})")]
    NonPositiveDefinite { det: f64, trace: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("standard deviation must be positive, got q_std = {q_std}, p_std = {p_std}")]
    NonPositiveStd { q_std: f64, p_std: f64 },

    #[error("bad architecture: {0}")]
    BadArchitecture(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tape does not match the network or batch: {0}")]
    TapeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad threshold: {0}")]
    BadThreshold(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("every cluster has fewer than {n_min} members")]
    AllClustersPruned { n_min: usize },

    #[error("the mixture has no components")]
    EmptyGmm,

    #[error("assignment of weight {index} references component {component}, but K = {k}")]
    InvalidComponentRef { index: usize, component: usize, k: usize },

    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("bad magic number: expected {expected:02x?}, found {found:02x?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    TruncatedFile { offset: usize, needed: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid configuration: {0}")]
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use maae_tensor::TensorError;
use thiserror::Error;

/// Failures while decoding a MAAF feature file or MAAC checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    TruncatedFile { offset: usize, needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed record: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum MaaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("bad image dimensions {height}x{width}: {reason}")]
    BadDims { height: usize, width: usize, reason: &'static str },
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("missing ground-truth mask for {0}")]
    MissingMask(PathBuf),
    #[error("AUROC needs both positive and negative labels")]
    DegenerateLabels,
    #[error("anomaly map is empty")]
    EmptyMap,
    #[error("training split is empty")]
    EmptyDataset,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint incompatible with configuration: {0}")]
    CheckpointMismatch(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

impl MaaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MaaeError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, MaaeError>;

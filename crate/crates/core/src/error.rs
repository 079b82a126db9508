use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("ingestion error: missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("ingestion error: {0} has no matching file in every modality directory")]
    OrphanFile(PathBuf),

    #[error("ingestion error: empty split in {0}")]
    EmptySplit(PathBuf),

    #[error("invalid label value {value} in {path} (num_classes = {num_classes})")]
    InvalidLabel {
        path: PathBuf,
        value: u8,
        num_classes: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("non-finite loss at step {step} in {component}")]
    NonFiniteLoss { step: u64, component: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint shape-manifest mismatch at array `{name}`: {detail}")]
    CheckpointManifest { name: String, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

/// Shorthand for raising a [`Error::Contract`] with a formatted message.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;

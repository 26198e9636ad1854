use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error(transparent)]
    ModelIo(#[from] ModelIoError),

    #[error("mutation selected no elements in any layer (operator {operator}, ratio {ratio})")]
    DegenerateMutation { operator: String, ratio: f64 },

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("invalid similarity matrix: {0}")]
    InvalidSimilarity(String),

    #[error("empty input: {0}")]
    Empty(String),
}

/// Failures while reading or writing the binary model container.
#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported model format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated model file: {0}")]
    Truncated(String),

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed header: {0}")]
    Header(String),
}

//! IDX (big-endian) image/label file reader.

use std::fs;
use std::path::{Path, PathBuf};

use mutattack_core::Dataset;
use thiserror::Error;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    Magic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: expected {expected} bytes of data, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{0} images but {1} labels")]
    CountMismatch(usize, usize),
    #[error("label {0} out of range 0..=9")]
    Label(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn short(path: &Path, expected: usize, found: usize) -> IdxError {
    IdxError::Length {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

/// Parses an idx3 image file into `(count, rows, cols, pixels in [0,1])`.
pub fn parse_images(
    path: &Path,
    bytes: &[u8],
) -> Result<(usize, usize, usize, Vec<f32>), IdxError> {
    let magic = be_u32(bytes, 0).ok_or_else(|| short(path, 16, bytes.len()))?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::Magic {
            path: path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let dims: Option<Vec<usize>> = (1..4)
        .map(|i| be_u32(bytes, i * 4).map(|v| v as usize))
        .collect();
    let dims = dims.ok_or_else(|| short(path, 16, bytes.len()))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = n * rows * cols;
    let data = &bytes[16..];
    if data.len() != expected {
        return Err(short(path, expected, data.len()));
    }
    let pixels = data.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0).ok_or_else(|| short(path, 8, bytes.len()))?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::Magic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n = be_u32(bytes, 4).ok_or_else(|| short(path, 8, bytes.len()))? as usize;
    let data = &bytes[8..];
    if data.len() != n {
        return Err(short(path, n, data.len()));
    }
    data.iter()
        .map(|&b| {
            if b <= 9 {
                Ok(usize::from(b))
            } else {
                Err(IdxError::Label(b))
            }
        })
        .collect()
}

pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let (n, rows, cols, pixels) = parse_images(images, &read(images)?)?;
    let labels = parse_labels(labels, &read(labels)?)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch(n, labels.len()));
    }
    Ok(Dataset::new(pixels, labels, vec![1, rows, cols]).expect("consistent sizes"))
}

/// Loads `train-*` or `t10k-*` IDX files from `dir`.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset, IdxError> {
    let p = split.prefix();
    load_pair(
        &dir.join(format!("{p}-images-idx3-ubyte")),
        &dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

//! Versioned binary model container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 4     | magic `MUTN`                                         |
//! | 4     | format version (`1`)                                 |
//! | 4     | JSON header length `h`                               |
//! | h     | JSON header: architecture, shapes, temperature, metadata |
//! | 4·p   | f32 payload: per layer, weights then bias, in order  |
//! | 4     | CRC32 of the payload bytes                           |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::layer::{Layer, LayerSpec};
use super::network::Network;
use crate::error::{ModelIoError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MUTN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    num_classes: usize,
    temperature: f32,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    metadata: Map<String, Value>,
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        num_classes: net.num_classes(),
        temperature: net.temperature(),
        layers: net.layers().iter().map(|l| l.spec().clone()).collect(),
        metadata: net.metadata().clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(net.parameter_count() * 4);
    for layer in net.layers() {
        for v in layer.weights().data().iter().chain(layer.bias().data()) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, ModelIoError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ModelIoError::Truncated(format!("missing {what}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| ModelIoError::Truncated("missing magic".into()))?
        .try_into()
        .unwrap();
    if magic != MAGIC {
        return Err(ModelIoError::BadMagic(magic).into());
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let header_len = read_u32(bytes, 8, "header length")? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| ModelIoError::Truncated("header cut short".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| ModelIoError::Header(e.to_string()))?;

    let param_count: usize = header
        .layers
        .iter()
        .filter(|s| s.is_trainable())
        .map(|s| {
            s.weight_shape().iter().product::<usize>() + s.bias_shape().iter().product::<usize>()
        })
        .sum();
    let start = 12 + header_len;
    let end = start + param_count * 4;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| ModelIoError::Truncated("payload cut short".into()))?;
    let stored = read_u32(bytes, end, "checksum")?;
    if bytes.len() != end + 4 {
        return Err(ModelIoError::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - end - 4
        ))
        .into());
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ModelIoError::ChecksumMismatch { stored, computed }.into());
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut layers = Vec::with_capacity(header.layers.len());
    for spec in header.layers {
        let layer = if spec.is_trainable() {
            let ws = spec.weight_shape();
            let bs = spec.bias_shape();
            let w: Vec<f32> = values.by_ref().take(ws.iter().product()).collect();
            let b: Vec<f32> = values.by_ref().take(bs.iter().product()).collect();
            Layer::with_params(spec, Tensor::new(ws, w)?, Tensor::new(bs, b)?)?
        } else {
            Layer::zeros(spec)
        };
        layers.push(layer);
    }
    let mut net = Network::new(header.input_shape, layers)?.with_temperature(header.temperature)?;
    if net.num_classes() != header.num_classes {
        return Err(ModelIoError::Header(format!(
            "header declares {} classes, architecture yields {}",
            header.num_classes,
            net.num_classes()
        ))
        .into());
    }
    net.set_metadata(header.metadata);
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

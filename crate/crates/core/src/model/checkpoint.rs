//! Binary model snapshots.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a
//! JSON header (precision, configuration echo, tensor names and shapes),
//! then every tensor's values in header order, little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ToyGpt;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

const MAGIC: &[u8; 8] = b"ELAGPT\x00\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    precision: String,
    config: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

pub fn write_checkpoint<T: Real>(model: &ToyGpt<Matrix<T>>) -> Result<Vec<u8>> {
    let named = model.named();
    let header = Header {
        version: CHECKPOINT_VERSION,
        precision: T::NAME.into(),
        config: model
            .config
            .kv_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        tensors: named
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in named {
        for &x in m.as_slice() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Decodes a snapshot into precision `T`, converting if it was stored in
/// the other one.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<ToyGpt<Matrix<T>>> {
    let bad = |msg: &str| Error::Format(format!("corrupt checkpoint: {msg}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version differs from preamble"));
    }
    let config = ModelConfig::from_map(&header.config).map_err(|e| bad(&format!("config: {e}")))?;
    let expected: Vec<TensorEntry> = ToyGpt::<Matrix<T>>::shapes_for(&config)?
        .into_iter()
        .map(|(name, (r, c))| TensorEntry { name, shape: [r, c] })
        .collect();
    if header.tensors != expected {
        return Err(bad("tensor table does not match the configuration"));
    }
    let data = &body[hlen..];
    let total: usize = expected.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    match header.precision.as_str() {
        "f32" => decode::<f32, T>(data, total, &config),
        "f64" => decode::<f64, T>(data, total, &config),
        other => Err(bad(&format!("unknown precision '{other}'"))),
    }
}

fn decode<S: Real, T: Real>(data: &[u8], total: usize, config: &ModelConfig) -> Result<ToyGpt<Matrix<T>>> {
    if data.len() != total * S::BYTES {
        return Err(Error::Format(format!(
            "corrupt checkpoint: {} data bytes, expected {}",
            data.len(),
            total * S::BYTES
        )));
    }
    let mut offset = 0;
    let skeleton = ToyGpt::<()>::skeleton(config)?;
    let shapes = ToyGpt::<Matrix<T>>::shapes_for(config)?;
    let mut shapes = shapes.into_iter();
    let model = skeleton.try_map(|_, _| {
        let (_, (r, c)) = shapes.next().expect("one shape per tensor");
        let n = r * c;
        let values: Vec<T> = data[offset * S::BYTES..(offset + n) * S::BYTES]
            .chunks_exact(S::BYTES)
            .map(|b| T::from_f64(S::read_le(b).to_f64()))
            .collect();
        offset += n;
        Matrix::new(r, c, values).map_err(|e| Error::Format(format!("corrupt checkpoint: {e}")))
    })?;
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &ToyGpt<Matrix<T>>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ToyGpt<Matrix<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

//! Versioned checkpoint container.
//!
//! Layout: magic `HSGECKPT`, little-endian `u32` format version, `u64` header
//! length, a JSON header (config, config digest, training counters, tensor
//! index), then every tensor in header order as row-major little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{HisToSgeModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSGECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gene_names: Vec<String>,
    #[serde(default)]
    pub extractor: String,
    /// Patch size used when the features were extracted.
    #[serde(default)]
    pub patch_w: u32,
    #[serde(default)]
    pub patch_h: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HisToSgeModel,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_digest: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Incompatible(msg.into())
}

fn named_tensors(model: &HisToSgeModel) -> Vec<(String, ArrayD<f64>)> {
    let mut out: Vec<(String, ArrayD<f64>)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_owned()))
        .collect();
    out.push(("input.shift".into(), model.input_shift.clone().into_dyn()));
    out.push(("input.scale".into(), model.input_scale.clone().into_dyn()));
    out
}

pub fn write_checkpoint(ckpt: &Checkpoint, w: &mut impl Write) -> std::io::Result<()> {
    let tensors = named_tensors(&ckpt.model);
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.model.config.clone(),
        config_digest: ckpt.model.config.digest(),
        meta: ckpt.meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in &tensors {
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version == 0 || version > CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint format version {version} is not supported (this build reads up to {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.config.digest() != header.config_digest {
        return Err(bad("config digest does not match the stored config"));
    }
    let mut model = HisToSgeModel::new(header.config.clone(), 0)
        .map_err(|e| bad(format!("stored config is invalid: {e}")))?;

    let mut offset = body_start;
    let mut loaded = std::collections::HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if end > bytes.len() {
            return Err(bad(format!("tensor {} is truncated", entry.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset = end;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("length from shape");
        loaded.insert(entry.name.clone(), arr);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    for (name, mut t) in model.params.tensors_mut() {
        let src = loaded
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.assign(&src);
    }
    for (name, dst) in [("input.shift", &mut model.input_shift), ("input.scale", &mut model.input_scale)] {
        let src = loaded
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let src: Array1<f64> = src
            .into_dimensionality()
            .map_err(|_| bad(format!("tensor {name} must be 1-D")))?;
        if src.len() != dst.len() {
            return Err(bad(format!("tensor {name} has length {}", src.len())));
        }
        *dst = src;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

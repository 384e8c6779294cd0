//! Checkpoint directories: `manifest.json` plus a little-endian f64 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::Model;
use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensor, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Number of elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors concatenated in store order as little-endian f64.
pub fn weights_blob(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.numel() * 8);
    for t in params.tensors() {
        for &x in t.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn ckpt_err(tensor: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0;
    let tensors = model
        .params()
        .tensors()
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.tensor.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len: t.tensor.len(),
            };
            offset += t.tensor.len() * 8;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let blob_path = dir.join(WEIGHTS);
    fs::write(&blob_path, weights_blob(model.params())).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            MANIFEST,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let blob_path = dir.join(WEIGHTS);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(ckpt_err(&e.name, format!("unsupported dtype {:?}", e.dtype)));
        }
        if e.shape.iter().product::<usize>() != e.len {
            return Err(ckpt_err(
                &e.name,
                format!("shape {:?} does not hold {} elements", e.shape, e.len),
            ));
        }
        if e.offset != expected_offset {
            return Err(ckpt_err(
                &e.name,
                format!("offset {} but expected {expected_offset}", e.offset),
            ));
        }
        let end = e.offset + e.len * 8;
        if end > blob.len() {
            return Err(ckpt_err(
                &e.name,
                format!("weights file truncated: needs {end} bytes, has {}", blob.len()),
            ));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(NamedTensor::new(e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        let last = manifest.tensors.last().map_or(WEIGHTS, |e| e.name.as_str());
        return Err(ckpt_err(
            last,
            format!(
                "weights file has {} bytes, manifest covers {expected_offset}",
                blob.len()
            ),
        ));
    }
    Model::from_parts(manifest.config, ParamStore::new(tensors))
}

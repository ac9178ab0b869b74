//! Checkpoint files.
//!
//! Layout (little-endian): magic `DCKP`, u16 version, u64 manifest length,
//! UTF-8 JSON manifest, one blob of f32 parameter values, and a CRC32 of
//! every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::RoutingTable;
use crate::numgrad::{Block, ParamStore};
use crate::posenet::{ModelConfig, PoseNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub block: Block,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset within the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub epoch: usize,
    pub config_hash: String,
    pub model_config: ModelConfig,
    /// Routing table JSON.
    pub routing: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: PoseNet<f64>,
    pub routing: RoutingTable,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn encode_checkpoint(model: &PoseNet<f64>, routing: &RoutingTable, epoch: usize, config_hash: &str) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut blob = Vec::new();
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            block: p.block,
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for &x in p.value.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        epoch,
        config_hash: config_hash.to_string(),
        model_config: model.cfg.clone(),
        routing: serde_json::from_str(&routing.to_json()?)?,
        tensors,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(14 + mjson.len() + blob.len() + 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    buf.extend_from_slice(&blob);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, model: &PoseNet<f64>, routing: &RoutingTable, epoch: usize, config_hash: &str) -> Result<()> {
    let bytes = encode_checkpoint(model, routing, epoch, config_hash)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let trunc = |d: String| Error::Truncated { what: WHAT, detail: d };
    if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { what: WHAT, expected: "DCKP".into() });
    }
    if bytes.len() < 18 {
        return Err(trunc(format!("{} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion { what: WHAT, found: version as u32, expected: CHECKPOINT_VERSION as u32 });
    }
    let mlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    if mlen > bytes.len() || 14 + mlen + 4 > bytes.len() {
        return Err(trunc(format!("manifest of {mlen} bytes exceeds file")));
    }
    let manifest: std::result::Result<Manifest, _> = serde_json::from_slice(&bytes[14..14 + mlen]);
    if let Ok(m) = &manifest {
        let floats: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let expected = 14 + mlen + floats * 4 + 4;
        if bytes.len() < expected {
            return Err(trunc(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::Format { what: WHAT, detail: format!("{} trailing bytes", bytes.len() - expected) });
        }
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { what: WHAT, stored, computed });
    }
    let manifest = manifest.map_err(|e| Error::Format { what: WHAT, detail: format!("manifest: {e}") })?;
    let blob = &body[14 + mlen..];
    let routing = RoutingTable::from_json(&manifest.routing.to_string())?;
    let mut model = PoseNet::<f64>::new(manifest.model_config.clone(), 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} tensors stored, model has {}", manifest.tensors.len(), model.store.len()),
        });
    }
    load_values(&mut model.store, &manifest, blob)?;
    Ok(Checkpoint { manifest, model, routing })
}

fn load_values(store: &mut ParamStore<f64>, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    for e in &manifest.tensors {
        let id = store.id(&e.name).map_err(|_| Error::Format { what: WHAT, detail: format!("unknown tensor {}", e.name) })?;
        let p = store.get_mut(id);
        if p.block != e.block || p.value.shape() != e.shape.as_slice() || e.dtype != "f32" {
            return Err(Error::Format { what: WHAT, detail: format!("tensor {} does not match the model", e.name) });
        }
        let n = p.value.len();
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Format { what: WHAT, detail: format!("tensor {} outside blob", e.name) })?;
        for (x, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Format { what: WHAT, detail: format!("non-finite value in {}", e.name) });
            }
            *x = v as f64;
        }
    }
    Ok(())
}

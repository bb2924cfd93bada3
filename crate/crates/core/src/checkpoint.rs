//! Adapter-only checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MLRA"                  magic
//! u32                      format version (1)
//! u64 + bytes              JSON metadata {model, train, seed}
//! u32                      tensor count
//! per tensor:
//!   u32 + bytes            dotted name (UTF-8)
//!   u32, u64 × ndim        shape
//!   u64                    byte offset into the payload
//! f32 × Σ numel            payload, row-major, in table order
//! ```
//!
//! Only trainable tensors are stored; the frozen base is rebuilt from
//! `model.base_seed`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MLRA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Adapter initialisation seed of the saved model.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Snapshot of every trainable tensor of `model`.
    pub fn from_model(model: &DecoderModel<f32>, train: &TrainConfig, seed: u64) -> Self {
        let meta = Metadata {
            model: model.config.clone(),
            train: train.clone(),
            seed,
        };
        Self::from_tensors(&model.named_trainable(), meta)
    }

    /// Checkpoint of arbitrary named tensors, laid out in the given order.
    pub fn from_tensors(tensors: &[(String, Tensor<f32>)], meta: Metadata) -> Self {
        let mut offset = 0u64;
        let tensors = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    data: t.to_vec(),
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| 4 * t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.payload_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.offset.to_le_bytes());
        }
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push((name, shape, offset));
        }
        let payload_start = r.pos;
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            if offset != expected {
                return Err(Error::Malformed(format!(
                    "tensor {name} at payload offset {offset}, expected {expected}"
                )));
            }
            let numel: usize = shape.iter().product();
            r.pos = payload_start + offset as usize;
            let raw = r.take(4 * numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected += 4 * numel as u64;
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    /// Rebuild the saved model on top of `base`, whose configuration must
    /// match the checkpoint's.
    pub fn restore(&self, base: &DecoderModel<f32>) -> Result<DecoderModel<f32>> {
        check_config(&base.config, &self.meta.model)?;
        let model = DecoderModel::new(base.config.clone(), self.meta.seed)?;
        let params = model.named_trainable();
        if params.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, model has {} trainable tensors",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, t), e) in params.iter().zip(&self.tensors) {
            if *name != e.name || t.shape() != e.shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {} {:?} does not match model tensor {name} {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&e.data);
        }
        Ok(model)
    }
}

fn check_config(base: &ModelConfig, saved: &ModelConfig) -> Result<()> {
    if base == saved {
        return Ok(());
    }
    let (a, b) = (serde_json::to_value(base)?, serde_json::to_value(saved)?);
    let mut diffs = Vec::new();
    diff_values("model", &a, &b, &mut diffs);
    Err(Error::ConfigMismatch(diffs.join(", ")))
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let vb = y.get(k).unwrap_or(&serde_json::Value::Null);
                diff_values(&format!("{path}.{k}"), va, vb, out);
            }
        }
        _ if a != b => out.push(format!("{path}: base {a}, checkpoint {b}")),
        _ => {}
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_checkpoint(model: &DecoderModel<f32>, train: &TrainConfig, seed: u64, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model, train, seed).to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn load_checkpoint(path: &Path, base: &DecoderModel<f32>) -> Result<DecoderModel<f32>> {
    read_checkpoint(path)?.restore(base)
}

//! Model checkpoints: magic, JSON metadata, then float32 parameter blocks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::read_all;
use crate::error::{io_err, CoreError, Result};
use crate::train::Network;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OTDRCK1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `dcae`, `faultnet`, or a reference denoiser name.
    pub model: String,
    pub arch: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub normalization: String,
    pub training: serde_json::Value,
    pub metrics: serde_json::Value,
    /// Filled in on save.
    #[serde(default)]
    pub blocks: Vec<BlockInfo>,
}

/// Parameters are stored as `param/<name>`, running statistics as `buffer/<name>`.
fn named_blocks<M: Network + ?Sized>(m: &M) -> Vec<(String, &otdr_tensor::Tensor)> {
    let params = m.params().iter().map(|p| (format!("param/{}", p.name), &p.value));
    let buffers = m.buffers().iter().map(|p| (format!("buffer/{}", p.name), &p.value));
    params.chain(buffers).collect()
}

pub fn save_checkpoint<M: Network + ?Sized>(path: &Path, model: &M, meta: &CheckpointMeta) -> Result<()> {
    let blocks = named_blocks(model);
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.blocks = blocks
        .iter()
        .map(|(name, t)| BlockInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &blocks {
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// A parsed checkpoint whose weights have not yet been bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub values: Vec<Vec<f64>>,
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_all(path)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(path, 0, "not an OTDRCK1 checkpoint (bad magic)"));
    }
    if bytes.len() < 16 {
        return Err(format_err(path, 8, "truncated metadata length"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(n)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| format_err(path, 16, "truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| format_err(path, 16, format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            16,
            format!("format version {} (expected {FORMAT_VERSION})", meta.format_version),
        ));
    }
    let mut pos = body;
    let mut values = Vec::with_capacity(meta.blocks.len());
    for b in &meta.blocks {
        let count: usize = b.shape.iter().product();
        if bytes.len() - pos < 4 * count {
            return Err(format_err(path, pos, format!("truncated block {}", b.name)));
        }
        values.push(
            bytes[pos..pos + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        );
        pos += 4 * count;
    }
    if pos != bytes.len() {
        return Err(format_err(path, pos, "trailing bytes after the last block"));
    }
    Ok(Checkpoint { meta, values })
}

impl Checkpoint {
    /// Copies the stored weights into a freshly built model of the same architecture.
    pub fn restore_into<M: Network + ?Sized>(&self, model: &mut M) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = named_blocks(model)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> = self
            .meta
            .blocks
            .iter()
            .map(|b| (b.name.clone(), b.shape.clone()))
            .collect();
        if expected != stored {
            return Err(CoreError::Config(format!(
                "checkpoint for '{}' does not match the model layout",
                self.meta.model
            )));
        }
        let n_params = model.params().len();
        let mut it = self.values.iter();
        for p in model.params_mut().iter_mut() {
            p.value.data_mut().copy_from_slice(it.next().expect("layout checked"));
        }
        for p in model.buffers_mut().iter_mut() {
            p.value.data_mut().copy_from_slice(it.next().expect("layout checked"));
        }
        debug_assert_eq!(self.values.len(), n_params + model.buffers().len());
        Ok(())
    }
}

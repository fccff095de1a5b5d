//! Weight checkpoints.
//!
//! Layout: magic `NLCK1\0`, a little-endian `u64` header length, the JSON
//! header, then every tensor's values as contiguous little-endian `f32`.
//! Tensor offsets in the header are byte offsets from the start of that
//! data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gpt, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"NLCK1\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Gpt<f32>, step: usize) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .named()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel();
            e
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        step,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(14 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Gpt<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let data_start = 14usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[14..data_start]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[data_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut expected_end = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if e.offset != expected_end || end > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} lies outside the data section", e.name)));
        }
        expected_end = end;
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
    }
    if expected_end != data.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let model = Gpt::from_named(header.config.clone(), named)?;
    Ok((model, header))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save(model: &Gpt<f32>, step: usize, path: &Path) -> Result<()> {
    let bytes = encode(model, step)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Gpt<f32>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

//! Binary checkpoints.
//!
//! ```text
//! "HEAE1\n" | u32 version | u64 header_len | JSON header | f32 payload | u32 CRC32(payload)
//! ```
//!
//! Integers and floats are little-endian. The header carries the model config
//! and a manifest of `(name, shape, offset)` whose entries tile the payload in
//! lexicographic name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HeaeModel, ModelConfig, ModelError};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"HEAE1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("payload checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

/// A loaded model with the CRC32 of the file it came from.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub model: HeaeModel<f32>,
    pub model_id: String,
}

pub fn to_bytes(model: &HeaeModel<f32>) -> Result<Vec<u8>, CheckpointError> {
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.num_values() * 4);
    for id in params.sorted_ids() {
        let p = params.get(id);
        if !p.value.is_finite() {
            return Err(CheckpointError::Format(format!("parameter {} is not finite", p.name)));
        }
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
            decay: p.decay,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Format(format!("file ends inside {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes the header, naming the offending key on failure.
pub fn parse_header(json: &[u8]) -> Result<Header, CheckpointError> {
    let de = &mut serde_json::Deserializer::from_slice(json);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CheckpointError::Format(format!("header key `{path}`: {}", e.into_inner()))
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint, CheckpointError> {
    let model_id = format!("{:08x}", crc32fast::hash(bytes));
    let mut rest = bytes;
    if take(&mut rest, MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Format("header length overflows".into()))?;
    let header = parse_header(take(&mut rest, header_len, "header")?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: header.format_version,
        });
    }
    if rest.len() < 4 {
        return Err(CheckpointError::Format("file ends before checksum".into()));
    }
    let (payload, crc) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut store = ParamStore::<f32>::new();
    let mut expected = 0u64;
    let mut prev: Option<&str> = None;
    for entry in &header.tensors {
        if prev.is_some_and(|p| p >= entry.name.as_str()) {
            return Err(CheckpointError::Format(format!("manifest not in name order at {}", entry.name)));
        }
        prev = Some(&entry.name);
        if entry.offset != expected {
            return Err(CheckpointError::Format(format!(
                "tensor {} starts at byte {}, expected {expected}",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = expected as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(CheckpointError::Format(format!("tensor {} runs past the payload", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Format(format!("tensor {}: {e}", entry.name)))?;
        store
            .insert(entry.name.clone(), t, entry.decay)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(CheckpointError::Format(format!(
            "manifest covers {expected} bytes, payload has {}",
            payload.len()
        )));
    }
    let model = HeaeModel::from_params(header.config, store)?;
    Ok(LoadedCheckpoint { model, model_id })
}

pub fn save(model: &HeaeModel<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LoadedCheckpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

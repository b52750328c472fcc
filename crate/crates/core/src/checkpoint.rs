//! Cascade checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CDPNCKPT"              8-byte magic
//! u32                      format version
//! u64                      manifest length in bytes
//! manifest                 UTF-8 JSON: per-stage config, tensor index, metadata
//! payload                  f64 values of every tensor, stage by stage
//! [u8; 32]                 SHA-256 of everything above
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{Cascade, CascadeError, CascadeMetadata};
use crate::model::{DpNet, DpNetConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"CDPNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a cascade checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint declares {declared} stages but contains {found}")]
    MissingStages { declared: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageEntry {
    config: DpNetConfig,
    tensors: Vec<TensorEntry>,
}

/// Human-readable part of a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage_count: usize,
    magnification: usize,
    image_channels: usize,
    metadata: CascadeMetadata,
    stages: Vec<StageEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes a cascade to bytes.
pub fn encode(cascade: &Cascade) -> Vec<u8> {
    let mut payload: Vec<u8> = Vec::new();
    let mut stages = Vec::with_capacity(cascade.len());
    let mut offset = 0usize;
    for net in cascade.stages() {
        let mut tensors = Vec::new();
        for (name, shape, values) in net.named_tensors() {
            for v in &values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                len: values.len(),
            });
            offset += values.len();
        }
        stages.push(StageEntry {
            config: *net.config(),
            tensors,
        });
    }
    let manifest = Manifest {
        stage_count: cascade.len(),
        magnification: cascade.magnification(),
        image_channels: cascade.image_channels(),
        metadata: cascade.metadata().clone(),
        stages,
    };
    let manifest = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + manifest.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses checkpoint bytes. Either the whole cascade is returned or an error.
pub fn decode(bytes: &[u8]) -> Result<Cascade, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 20 + 32 {
        return Err(CheckpointError::Corrupt("file truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let manifest_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let manifest_end = 20usize
        .checked_add(manifest_len)
        .filter(|end| *end <= body.len())
        .ok_or_else(|| CheckpointError::Corrupt("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&body[20..manifest_end])
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    let payload = &body[manifest_end..];
    if payload.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if manifest.stages.len() != manifest.stage_count || manifest.stage_count == 0 {
        return Err(CheckpointError::MissingStages {
            declared: manifest.stage_count,
            found: manifest.stages.len(),
        });
    }
    let mut nets = Vec::with_capacity(manifest.stages.len());
    for stage in &manifest.stages {
        let mut net = DpNet::new(stage.config, 0)?;
        let mut map = HashMap::with_capacity(stage.tensors.len());
        for t in &stage.tensors {
            let end = t
                .offset
                .checked_add(t.len)
                .filter(|e| *e <= values.len())
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{}` out of range", t.name)))?;
            map.insert(t.name.clone(), (t.shape.clone(), values[t.offset..end].to_vec()));
        }
        net.load_named_tensors(&map)?;
        nets.push(net);
    }
    let cascade = Cascade::with_metadata(nets, manifest.metadata)?;
    if cascade.magnification() != manifest.magnification {
        return Err(CheckpointError::Corrupt(format!(
            "manifest magnification {} disagrees with {} stages",
            manifest.magnification,
            cascade.len()
        )));
    }
    Ok(cascade)
}

/// Writes `cascade` to `path` via a temporary sibling file and rename.
pub fn save_checkpoint(cascade: &Cascade, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode(cascade);
    let tmp = path.with_extension("ckpt.partial");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Cascade, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

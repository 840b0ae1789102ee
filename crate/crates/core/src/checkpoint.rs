//! Self-describing checkpoint container.
//!
//! Layout: magic `EATC`, format version (`u32` LE), header length (`u64` LE),
//! a JSON header, then one EATF matrix blob per parameter followed by the
//! optimizer's first and second moments when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{decode_feature_matrix, encode_feature_matrix};
use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::training::{AdamW, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EATC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state persisted between runs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Best validation mean AP so far; negative infinity before any evaluation.
    pub best_map: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    config_hash: String,
    seed: u64,
    epoch: usize,
    step: usize,
    /// Absent before the first evaluation.
    best_map: Option<f64>,
    optimizer_step: Option<u64>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        config_hash: config_hash(&ckpt.config),
        seed: ckpt.config.seed,
        epoch: ckpt.epoch,
        step: ckpt.step,
        best_map: ckpt.best_map.is_finite().then_some(ckpt.best_map),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        params: ckpt
            .params
            .iter()
            .map(|(_, name, m)| ParamEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, m) in ckpt.params.iter() {
        out.extend_from_slice(&encode_feature_matrix(m));
    }
    if let Some(opt) = &ckpt.optimizer {
        for m in opt.first.iter().chain(&opt.second) {
            out.extend_from_slice(&encode_feature_matrix(m));
        }
    }
    out
}

/// Parses a checkpoint; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| fail(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fail(path, format!("bad header: {e}")))?;
    let mut offset = 16 + header_len;
    let mut read_matrix = |expect: (usize, usize)| -> Result<Matrix<f32>> {
        let (m, used) = decode_feature_matrix(&bytes[offset..], path)?;
        if m.shape() != expect {
            return Err(fail(
                path,
                format!("matrix shape {:?}, header says {expect:?}", m.shape()),
            ));
        }
        offset += used;
        Ok(m)
    };
    let mut params = ParamStore::new();
    for entry in &header.params {
        let m = read_matrix((entry.rows, entry.cols))?;
        params.add(entry.name.clone(), m);
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut first = Vec::with_capacity(header.params.len());
            for e in &header.params {
                first.push(read_matrix((e.rows, e.cols))?);
            }
            let mut second = Vec::with_capacity(header.params.len());
            for e in &header.params {
                second.push(read_matrix((e.rows, e.cols))?);
            }
            Some(AdamW { first, second, step })
        }
        None => None,
    };
    if offset != bytes.len() {
        return Err(fail(path, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        epoch: header.epoch,
        step: header.step,
        best_map: header.best_map.unwrap_or(f64::NEG_INFINITY),
    })
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    let bytes = encode_checkpoint(ckpt);
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(&bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and warns when it was written under another config.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(&path)?;
    if !config_matches(&ckpt, expected) {
        log::warn!(
            "{}: checkpoint config hash {} differs from the requested config {}",
            path.as_ref().display(),
            config_hash(&ckpt.config),
            config_hash(expected)
        );
    }
    Ok(ckpt)
}

pub fn config_matches(ckpt: &Checkpoint, expected: &TrainConfig) -> bool {
    config_hash(&ckpt.config) == config_hash(expected)
}

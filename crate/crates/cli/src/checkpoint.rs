//! Checkpoint files: an 8-byte little-endian header length, a JSON header,
//! then every parameter as little-endian `f32` in registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crowdgraph_core::config::RunConfig;
use crowdgraph_core::rng::RngState;
use crowdgraph_core::vgae::CrowdVgae;

use crate::config::{config_hash, data_hash, model_hash};
use crate::error::{CliError, Result};
use crate::io::{atomic_write, sha256_hex};

pub const FORMAT: &str = "crowdgraph-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub data_hash: String,
    pub model_hash: String,
    pub config: RunConfig,
    /// Last completed epoch of the run that wrote this file.
    pub epoch: usize,
    /// Epoch whose parameters are stored.
    pub params_epoch: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// Training progress stored alongside the parameters.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub params_epoch: usize,
    pub rng: RngState,
}

pub fn encode(cfg: &RunConfig, meta: &CheckpointMeta, model: &CrowdVgae) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(model.store.num_scalars() * 4);
    for x in model.store.flatten() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        config_hash: config_hash(cfg)?,
        data_hash: data_hash(cfg)?,
        model_hash: model_hash(cfg)?,
        config: cfg.clone(),
        epoch: meta.epoch,
        params_epoch: meta.params_epoch,
        rng: meta.rng.clone(),
        tensors: model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CliError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(path: &Path, cfg: &RunConfig, meta: &CheckpointMeta, model: &CrowdVgae) -> Result<()> {
    atomic_write(path, &encode(cfg, meta, model)?)
}

/// Parses and verifies a checkpoint: header integrity, payload digest and
/// that every tensor matches the architecture its config describes.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, CrowdVgae)> {
    let bad = |m: String| CliError::Data(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if hlen > body.len() {
        return Err(bad(format!("header length {hlen} exceeds file size")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.config_hash != config_hash(&header.config)?
        || header.model_hash != model_hash(&header.config)?
    {
        return Err(bad("config hash does not match the embedded config".into()));
    }
    let payload = &body[hlen..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload digest mismatch".into()));
    }
    let mut model = CrowdVgae::new(header.config.model.clone(), 0);
    let expected: Vec<TensorEntry> = model
        .store
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the model config".into()));
    }
    if payload.len() != model.store.num_scalars() * 4 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            model.store.num_scalars() * 4
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    model
        .store
        .load_flat(&flat)
        .map_err(|e| bad(e.to_string()))?;
    Ok((header, model))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, CrowdVgae)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(path, e))?;
    decode(&bytes).map_err(|e| CliError::data(path, e))
}

/// Rejects using a checkpoint under a config with a different architecture
/// or text pipeline.
pub fn check_compatible(header: &CheckpointHeader, cfg: &RunConfig) -> Result<()> {
    if header.model_hash != model_hash(cfg)? {
        return Err(CliError::Data(format!(
            "checkpoint model hash {} does not match the config ({})",
            header.model_hash,
            model_hash(cfg)?
        )));
    }
    Ok(())
}

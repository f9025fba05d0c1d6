//! Atomic file writes, JSONL datasets and reproducibility manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crowdgraph_core::config::RunConfig;

use crate::error::{CliError, Result};

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::data(path, e)
    })
}

pub fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| CliError::Data(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    atomic_write(path, &jsonl_bytes(items)?)
}

/// Parses one value per non-empty line; errors name the offending line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::data(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &fs::read(path).map_err(|e| CliError::data(path, e))?,
    ))
}

/// `dir/name.jsonl` → `dir/name.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("manifest.json");
    }
    artifact.with_extension("manifest.json")
}

/// `dir/name.jsonl` → `dir/name.<part>.jsonl`.
pub fn sibling(artifact: &Path, part: &str, ext: &str) -> PathBuf {
    let stem = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    artifact.with_file_name(format!("{stem}.{part}.{ext}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

impl InputRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Written next to every artifact: what produced it and from which inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub core_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub config: RunConfig,
    #[serde(default)]
    pub inputs: Vec<InputRef>,
    /// Command-specific counts and summaries.
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: crowdgraph_core::VERSION.into(),
            seed: cfg.seed,
            config_hash: crate::config::config_hash(cfg)?,
            data_hash: crate::config::data_hash(cfg)?,
            model_hash: None,
            config: cfg.clone(),
            inputs: Vec::new(),
            details: serde_json::Value::Null,
        })
    }

    pub fn write_for(&self, artifact: &Path) -> Result<()> {
        write_json(&manifest_path(artifact), self)
    }

    pub fn read_for(artifact: &Path) -> Result<Self> {
        let p = manifest_path(artifact);
        if !p.exists() {
            return Err(CliError::data(
                artifact,
                format!("no manifest at {}", p.display()),
            ));
        }
        read_json(&p)
    }
}

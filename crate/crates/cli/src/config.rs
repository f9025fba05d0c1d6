//! Config files and their hashes.
//!
//! Hashes are SHA-256 over the canonical JSON of a config section: the
//! value is rebuilt from the parsed struct, and object keys are emitted in
//! sorted order, so key order and whitespace in the file never matter.

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use crowdgraph_core::config::RunConfig;

use crate::error::{CliError, Result};
use crate::io::sha256_hex;

/// Parses a JSON config; unknown keys and out-of-range values are usage errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(CliError::Usage(format!("config: {}", problems.join("; "))));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn hash_value<T: Serialize>(v: &T) -> Result<String> {
    // serde_json's default map is ordered by key, which makes this canonical
    let value = serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))?;
    let text = serde_json::to_string(&value).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Hash of the whole configuration.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    hash_value(cfg)
}

/// Hash of everything that determines dataset contents and splits.
pub fn data_hash(cfg: &RunConfig) -> Result<String> {
    let llm =
        (cfg.source == crowdgraph_core::config::ScenarioSource::Llm).then_some(&cfg.llm.model);
    hash_value(&json!({
        "seed": cfg.seed,
        "source": cfg.source,
        "llm_model": llm,
        "data": cfg.data,
        "split": cfg.split,
    }))
}

/// Hash of everything a checkpoint's consumers must agree on: the
/// architecture and how text is turned into conditions.
pub fn model_hash(cfg: &RunConfig) -> Result<String> {
    hash_value(&json!({ "model": cfg.model, "order": cfg.order, "text": cfg.text }))
}

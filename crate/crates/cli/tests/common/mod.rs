#![allow(dead_code)]

use std::path::{Path, PathBuf};

use crowdgraph::commands::gen_data;
use crowdgraph_core::config::RunConfig;

/// Small data and a small model, for pipeline tests that train.
pub fn smoke_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 5,
        ..RunConfig::default()
    };
    c.data.scenarios = 4;
    c.data.variants = 2;
    c.data.sims_per_scenario = 2;
    c.data.paraphrases = 4;
    c.model.encoder_hidden = 16;
    c.model.decoder_hidden = 32;
    c.model.condition_dim = 16;
    c.model.prior_hidden = 8;
    c.train.epochs = 3;
    c.train.batch_size = 32;
    c
}

pub fn smoke_dataset(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let out = dir.join("data.jsonl");
    gen_data(cfg, &out, None, None).expect("gen-data");
    out
}

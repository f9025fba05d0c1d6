//! Run configuration: every tunable of the pipeline in one serde tree.
//!
//! Unknown keys are rejected at every level. Randomness flows from the
//! single root `seed`; each stage draws from [`RunConfig::stage_seed`].

use serde::{Deserialize, Serialize};

use crate::dataset::{DataConfig, OrderMode};
use crate::generation::DEFAULT_TAU;
use crate::graph::SplitFractions;
use crate::prelude::*;
use crate::rng::mix;
use crate::vgae::{ModelConfig, TrainConfig};

/// Where scenarios come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    #[default]
    Offline,
    Llm,
}

/// Which text embedder produces sentence conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProvider {
    #[default]
    Hashing,
    /// The endpoint named by `CROWDGRAPH_EMB_URL`.
    External,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub provider: EmbeddingProvider,
    /// Verb lexicon file replacing the built-in list.
    pub lexicon: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub model: String,
    /// Attempts per query before giving up on a malformed answer.
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub temperature: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            max_attempts: 3,
            timeout_secs: 60,
            temperature: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub source: ScenarioSource,
    pub data: DataConfig,
    pub split: SplitFractions,
    /// Node order of the training tensors.
    pub order: OrderMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Adjacency threshold when discretizing generated structure.
    pub tau: f64,
    pub text: TextConfig,
    pub llm: LlmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: ScenarioSource::Offline,
            data: DataConfig::default(),
            split: SplitFractions::default(),
            order: OrderMode::AgentMajor,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tau: DEFAULT_TAU,
            text: TextConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl RunConfig {
    /// The CPU-sized budget: 400 epochs with a 100-epoch β cycle. β peaks
    /// at 0.1 because with this little training a stronger KL pull collapses
    /// the structure latent and the generated path lengths lose their tail.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.epochs = 400;
        c.train.beta_cycle = 100;
        c.train.beta_max = 0.1;
        c
    }

    /// Seed for a named stage (`"data"`, `"split"`, `"train"`, ...).
    pub fn stage_seed(&self, stage: &str) -> u64 {
        mix(self.seed, stage)
    }

    /// Training settings with the seed derived from the root.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train"),
            ..self.train.clone()
        }
    }

    /// Range checks that serde cannot express. Returns one message per problem.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.data;
        if d.scenarios == 0 || d.variants == 0 || d.sims_per_scenario == 0 {
            out.push("data: scenarios, variants and sims_per_scenario must be positive".into());
        }
        if d.agent_count == 0 {
            out.push("data.agent_count must be positive".into());
        }
        if let Some([w, h]) = d.env_size {
            if !(10.0..=200.0).contains(&w) || !(10.0..=200.0).contains(&h) {
                out.push(format!("data.env_size {:?} outside [10, 200] m", [w, h]));
            }
        }
        if !(d.duration_range[0] > 0.0 && d.duration_range[0] <= d.duration_range[1]) {
            out.push(format!(
                "data.duration_range {:?} must be positive and ordered",
                d.duration_range
            ));
        }
        if !(0.7 <= d.temp_range[0] && d.temp_range[0] <= d.temp_range[1] && d.temp_range[1] <= 1.0)
        {
            out.push(format!(
                "data.temp_range {:?} must lie in [0.7, 1]",
                d.temp_range
            ));
        }
        let g: f64 = d.group_size_probs.iter().sum();
        if d.group_size_probs.iter().any(|p| *p < 0.0) || (g - 1.0).abs() > 1e-6 {
            out.push(format!(
                "data.group_size_probs {:?} must sum to 1",
                d.group_size_probs
            ));
        }
        let s = [self.split.train, self.split.val, self.split.test];
        if s.iter().any(|f| !(*f > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            out.push(format!("split {s:?} must be positive and sum to 1"));
        }
        if self.model.latent == 0
            || self.model.encoder_hidden == 0
            || self.model.decoder_hidden == 0
        {
            out.push("model dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            out.push(format!(
                "model.dropout {} outside [0, 1)",
                self.model.dropout
            ));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            out.push("train.epochs and train.batch_size must be positive".into());
        }
        if !(0.1..=4.0).contains(&t.beta_max) {
            out.push(format!("train.beta_max {} outside [0.1, 4]", t.beta_max));
        }
        if !(t.adam.lr > 0.0) {
            out.push(format!("train.adam.lr {} must be positive", t.adam.lr));
        }
        if !(0.0..1.0).contains(&self.tau) {
            out.push(format!("tau {} outside [0, 1)", self.tau));
        }
        if self.llm.max_attempts == 0 {
            out.push("llm.max_attempts must be positive".into());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_stages_differ() {
        let c = RunConfig::default();
        assert!(c.validate().is_empty(), "{:?}", c.validate());
        assert_eq!(c.train.epochs, 2000);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.train.beta_cycle, 200);
        assert_eq!(c.model.latent, 16);
        assert_ne!(c.stage_seed("data"), c.stage_seed("train"));
        assert_eq!(c.train_config().seed, c.stage_seed("train"));
        let d = RunConfig::desk();
        assert_eq!((d.train.epochs, d.train.beta_cycle), (400, 100));
    }

    #[test]
    fn out_of_range_values_are_reported() {
        let mut c = RunConfig {
            tau: 1.5,
            ..RunConfig::default()
        };
        c.train.beta_max = 9.0;
        c.data.env_size = Some([5.0, 50.0]);
        assert_eq!(c.validate().len(), 3);
    }
}

//! Dual conditional variational graph auto-encoder: one latent space for
//! graph structure and one for node features, each with a learned prior
//! conditioned on the sentence and the number of agents.

mod batch;
mod model;
mod train;

pub use batch::{upper_index, Batch, TextBank, TrainSample, UPPER};
pub use model::{
    ConditionNet, CrowdVgae, Encoder, FeatureDecoder, Gaussian, LatentBranch, LossVars,
    NodeEmbedder, PriorNet, StructureDecoder, FEATURE_LOGITS, LOGVAR_MAX, LOGVAR_MIN,
};
pub use train::{evaluate_losses, train, EpochLog, LossTotals, TrainError, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::tensor::{kl_term, smooth_l1, AdamConfig, Tensor};

/// Whether structure and features get separate latent spaces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Dual,
    /// One encoder, condition net and prior whose latent feeds both decoders.
    SingleLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub latent: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub condition_dim: usize,
    pub prior_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Dual,
            latent: 16,
            encoder_hidden: 96,
            decoder_hidden: 128,
            condition_dim: 128,
            prior_hidden: 64,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_max: f64,
    pub beta_cycle: usize,
    pub adam: AdamConfig,
    /// Derived from the run's root seed, so never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Pick a random paraphrase of each sample's sentence every epoch.
    pub paraphrase_text: bool,
    /// Skip validation on epochs not divisible by this (the last epoch is always validated).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 256,
            beta_max: 4.0,
            beta_cycle: 200,
            adam: AdamConfig::default(),
            seed: 0,
            paraphrase_text: true,
            validate_every: 1,
        }
    }
}

/// Cyclical KL weight: linear ramp from 0 to `beta_max` over the first
/// half of each cycle, then held for the second half.
pub fn beta(epoch: usize, cycle: usize, beta_max: f64) -> f64 {
    if cycle == 0 {
        return beta_max;
    }
    let pos = epoch % cycle;
    let half = cycle as f64 / 2.0;
    if (pos as f64) < half {
        beta_max * pos as f64 / half
    } else {
        beta_max
    }
}

/// `Σ_ij SmoothL1(pred_ij − target_ij)` over two equal-shape matrices.
pub fn structure_loss(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "structure loss shapes");
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

/// Closed-form KL between diagonal Gaussians given as means and log-variances.
pub fn kl_diag_gaussian(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| kl_term(mq[i], lq[i], mp[i], lp[i]))
        .sum()
}

#[cfg(test)]
mod tests;

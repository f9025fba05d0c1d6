//! Mini-batch training with Adam, cyclical KL weighting and per-epoch
//! validation.

use super::batch::{Batch, TextBank, TrainSample};
use super::model::{CrowdVgae, LossVars};
use super::{beta, TrainConfig};
use crate::prelude::*;
use crate::rng::SimRng;
use crate::tensor::{Adam, Mode, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-sample means of the loss terms over a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTotals {
    pub structure: f64,
    pub features: f64,
    pub kl_s: f64,
    pub kl_f: f64,
}

impl LossTotals {
    /// `L_S + L_F + β (KL_S + KL_F)`.
    pub fn weighted(&self, beta: f64) -> f64 {
        self.structure + self.features + beta * (self.kl_s + self.kl_f)
    }

    fn add(&mut self, tape: &Tape, l: &LossVars) {
        self.structure += tape.value(l.structure).item();
        self.features += tape.value(l.features).item();
        self.kl_s += tape.value(l.kl_s).item();
        self.kl_f += l.kl_f.map_or(0.0, |v| tape.value(v).item());
    }

    fn scale(&mut self, s: f64) {
        self.structure *= s;
        self.features *= s;
        self.kl_s *= s;
        self.kl_f *= s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub train: LossTotals,
    /// Validation terms with the posterior mean; `None` on skipped epochs.
    pub val: Option<LossTotals>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last finite epoch.
    pub model: CrowdVgae,
    /// Flattened parameters with the lowest validation `L_S + L_F + KL` (β = 1).
    pub best_params: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
    pub rng: SimRng,
}

impl TrainOutcome {
    /// The model with its best-validation parameters loaded.
    pub fn best_model(&self) -> Result<CrowdVgae, TensorError> {
        let mut m = self.model.clone();
        m.store.load_flat(&self.best_params)?;
        Ok(m)
    }
}

/// Loss terms averaged per sample, posterior mean, evaluation mode.
pub fn evaluate_losses(
    model: &mut CrowdVgae,
    samples: &[TrainSample],
    texts: &TextBank,
    batch_size: usize,
) -> Result<LossTotals, TensorError> {
    let mut totals = LossTotals::default();
    let mut rng = SimRng::seed(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let text: Vec<&[f64]> = chunk
            .iter()
            .map(|s| texts.variant(s.sentence, None))
            .collect();
        let b = Batch::assemble(&refs, &text)?;
        let mut tape = Tape::new();
        let l = model.losses(&mut tape, &b, Mode::Eval, false, &mut rng)?;
        totals.add(&tape, &l);
    }
    totals.scale(1.0 / samples.len().max(1) as f64);
    Ok(totals)
}

/// Trains `model` in place; `on_epoch` sees every epoch's log (for progress
/// output and checkpointing) and may stop training early by returning false.
pub fn train(
    mut model: CrowdVgae,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    texts: &TextBank,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &CrowdVgae) -> bool,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let adam = Adam::new(cfg.adam);
    let mut rng = SimRng::split(cfg.seed, "train");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_params = model.store.flatten();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut diverged = None;
    let every = cfg.validate_every.max(1);

    for epoch in 0..cfg.epochs {
        let b_weight = beta(epoch, cfg.beta_cycle, cfg.beta_max);
        rng.shuffle(&mut order);
        let snapshot = model.store.clone();
        let mut totals = LossTotals::default();
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let text: Vec<&[f64]> = refs
                .iter()
                .map(|s| {
                    let n = texts.variant_count(s.sentence);
                    let k = (cfg.paraphrase_text && n > 0).then(|| rng.below(n));
                    texts.variant(s.sentence, k)
                })
                .collect();
            let b = Batch::assemble(&refs, &text)?;
            let mut tape = Tape::new();
            let l = model.losses(&mut tape, &b, Mode::Train, true, &mut rng)?;
            let kl = match l.kl_f {
                Some(kf) => tape.add(l.kl_s, kf),
                None => l.kl_s,
            };
            let kl = tape.scale(kl, b_weight);
            let rec = tape.add(l.structure, l.features);
            let total = tape.add(rec, kl);
            let loss = tape.scale(total, 1.0 / b.graphs as f64);
            let v = tape.value(loss).item();
            if !v.is_finite() {
                failure = Some(format!("non-finite training loss at epoch {epoch}"));
                break;
            }
            totals.add(&tape, &l);
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
        }
        if failure.is_none() && !model.store.flatten().iter().all(|x| x.is_finite()) {
            failure = Some(format!("non-finite parameters after epoch {epoch}"));
        }
        if let Some(msg) = failure {
            model.store = snapshot;
            diverged = Some(msg);
            break;
        }
        totals.scale(1.0 / train_set.len() as f64);
        let val = if epoch % every == 0 || epoch + 1 == cfg.epochs {
            let v = evaluate_losses(&mut model, val_set, texts, cfg.batch_size)?;
            let metric = v.weighted(1.0);
            if metric < best_val {
                best_val = metric;
                best_epoch = epoch;
                best_params = model.store.flatten();
            }
            Some(v)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            beta: b_weight,
            train: totals,
            val,
        };
        history.push(log);
        if !on_epoch(&log, &model) {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        best_params,
        best_epoch,
        best_val,
        history,
        diverged,
        rng,
    })
}

//! Supervised training of whole models: fine-tuning from a pretrained
//! encoder, class-aware weighting and two-stage imbalance training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sleepssl_nn::{apply_buffer_updates, Adam, AdamConfig, Checkpoint, Graph};

use crate::backbone::{Model, ModelSpec};
use crate::dataio::{oversample_balanced, EpochSet, N_STAGES};
use crate::error::{Result, SslError};
use crate::pretext::{cross_entropy, CrossEntropyOp};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 128, lr: 1e-3, weight_decay: 1e-4 }
    }
}

impl TrainBudget {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr as f32, weight_decay: self.weight_decay as f32, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(SslError::InvalidArgument(format!("invalid training budget {self:?}")));
        }
        Ok(())
    }

    /// Optimizer steps for one pass over `n` epochs.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub steps: u64,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Class weights `(N / n_c)^0.5`, rescaled to mean 1.
pub fn class_aware_weights(counts: &[usize; N_STAGES]) -> Result<[f64; N_STAGES]> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(SslError::EmptyClass(crate::dataio::Stage::ALL[c].name()));
    }
    let total: usize = counts.iter().sum();
    let mut w = counts.map(|n| (total as f64 / n as f64).sqrt());
    let mean = w.iter().sum::<f64>() / N_STAGES as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    Ok(w)
}

/// Fresh model whose feature extractor is taken from `encoder` when given.
pub fn init_model(encoder: Option<&Checkpoint>, spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::build(spec, seed)?;
    if let Some(ckpt) = encoder {
        model.load_encoder(ckpt)?;
    }
    Ok(model)
}

/// Continues training every parameter of `model` with (optionally weighted)
/// cross-entropy on `labeled`.
pub fn train_supervised(
    model: &mut Model,
    labeled: &EpochSet,
    budget: &TrainBudget,
    weights: Option<&[f64; N_STAGES]>,
    seed: u64,
) -> Result<(u64, Vec<f64>)> {
    budget.validate()?;
    if labeled.is_empty() {
        return Err(SslError::InvalidArgument("empty label set".into()));
    }
    let mut opt = Adam::new(budget.adam());
    let mut losses = Vec::with_capacity(budget.epochs);
    for epoch in 0..budget.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[seed::tag("finetune-shuffle"), epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(budget.batch_size) {
            let (grads, updates, loss) = {
                let mut g = Graph::train(model.store(), seed::derive(seed, &[seed::tag("finetune-step"), opt.steps()]));
                let x = g.input(labeled.batch(chunk));
                let logits = model.logits(&mut g, x);
                let op = CrossEntropyOp::new(labeled.batch_labels(chunk), weights.map(|w| w.to_vec()));
                let loss = g.custom(Box::new(op), &[logits]);
                let value = g.value(loss).item() as f64;
                (g.backward(loss), g.take_buffer_updates(), value)
            };
            if !loss.is_finite() {
                return Err(SslError::Diverged { epoch: epoch + 1, loss });
            }
            opt.step(model.store_mut(), &grads);
            apply_buffer_updates(model.store_mut(), updates);
            sum += loss;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    Ok((opt.steps(), losses))
}

/// End-to-end fine-tuning: encoder from `encoder` (random when `None`),
/// temporal encoder and classifier fresh.
pub fn finetune(
    encoder: Option<&Checkpoint>,
    spec: &ModelSpec,
    labeled: &EpochSet,
    budget: &TrainBudget,
    weights: Option<&[f64; N_STAGES]>,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if labeled.is_empty() {
        return Err(SslError::InvalidArgument("empty label set".into()));
    }
    let mut model = init_model(encoder, spec, seed)?;
    let (steps, losses) = train_supervised(&mut model, labeled, budget, weights, seed)?;
    Ok(FinetuneOutcome { model, steps, losses })
}

/// Stage one trains on a class-balanced resample, stage two continues on the
/// original labels; each stage gets the full budget.
pub fn two_stage_train(
    encoder: Option<&Checkpoint>,
    spec: &ModelSpec,
    labeled: &EpochSet,
    budget: &TrainBudget,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let balanced = oversample_balanced(labeled, seed)?;
    let mut model = init_model(encoder, spec, seed)?;
    let (s1, mut losses) = train_supervised(&mut model, &balanced, budget, None, seed::derive(seed, &[1]))?;
    let (s2, l2) = train_supervised(&mut model, labeled, budget, None, seed::derive(seed, &[2]))?;
    losses.extend(l2);
    Ok(FinetuneOutcome { model, steps: s1 + s2, losses })
}

/// Evaluation-mode mean cross-entropy of `model` on `set`.
pub fn mean_cross_entropy(model: &Model, set: &EpochSet) -> Result<f64> {
    let all: Vec<usize> = (0..set.len()).collect();
    let logits = model.predict_logits(&set.batch(&all), 256)?;
    cross_entropy(&logits, &set.batch_labels(&all), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_counts_give_unit_weights() {
        assert_eq!(class_aware_weights(&[7; 5]).unwrap(), [1.0; 5]);
    }

    #[test]
    fn weights_follow_inverse_square_root() {
        let w = class_aware_weights(&[100, 25, 100, 100, 100]).unwrap();
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
        assert!(class_aware_weights(&[1, 0, 1, 1, 1]).is_err());
    }
}

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sleepssl_nn::{apply_buffer_updates, Adam, AdamConfig, Checkpoint, Graph, Tensor};

use super::{Algorithm, PretextBatchResult, PretextConfig, PretextHeads};
use crate::backbone::{Model, ModelSpec};
use crate::error::{Result, SslError};
use crate::seed;

/// A model with pretext heads and optimizer state.
#[derive(Debug, Clone)]
pub struct PretextTrainer {
    model: Model,
    heads: PretextHeads,
    cfg: PretextConfig,
    opt: Adam,
}

impl PretextTrainer {
    pub fn new(spec: &ModelSpec, algorithm: Algorithm, cfg: &PretextConfig, optim: AdamConfig, seed: u64) -> Result<Self> {
        Self::from_model(Model::build(spec, seed)?, algorithm, cfg, optim, seed)
    }

    pub fn from_model(mut model: Model, algorithm: Algorithm, cfg: &PretextConfig, optim: AdamConfig, seed: u64) -> Result<Self> {
        let heads = PretextHeads::attach(&mut model, algorithm, cfg, seed)?;
        Ok(Self { model, heads, cfg: *cfg, opt: Adam::new(optim) })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn heads(&self) -> &PretextHeads {
        &self.heads
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// One optimizer update on batch `x`. `seed` fixes augmentations and
    /// dropout masks.
    pub fn step(&mut self, x: &Tensor, seed: u64) -> Result<PretextBatchResult> {
        let (grads, updates, result) = {
            let mut g = Graph::train(self.model.store(), seed::derive(seed, &[seed::tag("dropout")]));
            let s = self.heads.step(&mut g, &self.model, x, &self.cfg, seed)?;
            let grads = g.backward(s.loss);
            (grads, g.take_buffer_updates(), s.result)
        };
        self.opt.step(self.model.store_mut(), &grads);
        apply_buffer_updates(self.model.store_mut(), updates);
        Ok(result)
    }

    /// The objective on `x` with the same randomness as [`Self::step`] but
    /// without touching any state.
    pub fn evaluate(&self, x: &Tensor, seed: u64) -> Result<PretextBatchResult> {
        let mut g = Graph::train(self.model.store(), seed::derive(seed, &[seed::tag("dropout")]));
        Ok(self.heads.step(&mut g, &self.model, x, &self.cfg, seed)?.result)
    }

    pub fn encoder_checkpoint(&self) -> Result<Checkpoint> {
        self.model.encoder_checkpoint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pretext: PretextConfig,
}

impl PretrainConfig {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        Self { algorithm, epochs: 40, batch_size: 128, lr: 1e-3, weight_decay: 1e-4, seed, pretext: PretextConfig::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr as f32, weight_decay: self.weight_decay as f32, ..AdamConfig::default() }
    }
}

/// Mean batch loss and diagnostics of one pretraining epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub positive_similarity: Option<f64>,
    pub info_nce_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Feature-extractor tensors only.
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub steps: u64,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SslError::Report(format!("{}: {e}", path.display())))?;
    for row in trace {
        w.serialize(row).map_err(|e| SslError::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| SslError::io(path, e))
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Trains the feature extractor on unlabeled epochs `data: [N, L]` and
/// returns its checkpoint. When `trace_path` is given the per-epoch trace is
/// rewritten there after every epoch, so it survives a divergence abort.
pub fn pretrain(spec: &ModelSpec, data: &Tensor, cfg: &PretrainConfig, trace_path: Option<&Path>) -> Result<PretrainOutcome> {
    let min = cfg.algorithm.min_batch();
    if data.dims() != 2 || data.dim(0) < min {
        return Err(SslError::InvalidArgument(format!(
            "{} pretraining needs at least {min} unlabeled epochs, got shape {:?}",
            cfg.algorithm,
            data.shape()
        )));
    }
    if cfg.batch_size < min {
        return Err(SslError::InvalidArgument(format!("batch size {} below {min}", cfg.batch_size)));
    }
    let mut trainer = PretextTrainer::new(spec, cfg.algorithm, &cfg.pretext, cfg.adam(), cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let n = data.dim(0);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("pretrain-shuffle"), epoch as u64]));
        let mut results = Vec::new();
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= min) {
            let step_seed = seed::derive(cfg.seed, &[seed::tag("pretrain-step"), trainer.steps()]);
            match trainer.step(&data.select_rows(chunk), step_seed) {
                Ok(r) => results.push(r),
                Err(SslError::Diverged { loss, .. }) => {
                    if let Some(p) = trace_path {
                        write_trace_csv(&trace, p)?;
                    }
                    return Err(SslError::Diverged { epoch, loss });
                }
                Err(e) => return Err(e),
            }
        }
        trace.push(TraceRow {
            epoch,
            loss: mean_of(results.iter().map(|r| r.loss)).unwrap_or(f64::NAN),
            pseudo_label_accuracy: mean_of(results.iter().filter_map(|r| r.aux.pseudo_label_accuracy)),
            positive_similarity: mean_of(results.iter().filter_map(|r| r.aux.positive_similarity)),
            info_nce_mean: mean_of(results.iter().filter_map(|r| mean_of(r.aux.info_nce_per_step.iter().copied()))),
        });
        if let Some(p) = trace_path {
            write_trace_csv(&trace, p)?;
        }
    }
    Ok(PretrainOutcome { checkpoint: trainer.encoder_checkpoint()?, trace, steps: trainer.steps() })
}

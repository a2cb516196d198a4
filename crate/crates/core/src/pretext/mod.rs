//! Self-supervised objectives for the feature extractor: transformation
//! classification, SimCLR, CPC and TS-TCC.
//!
//! Every objective is a graph builder that returns the loss variable along
//! with batch diagnostics. Pretext heads live in the model's parameter store
//! under [`PRETEXT_PREFIX`] and are dropped when the encoder is saved.

mod heads;
pub mod losses;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sleepssl_nn::{Graph, Tensor, Var};

use crate::augment::{make_view_pair, AugmentConfig, AugmentationSpec, ViewMode};
use crate::backbone::Model;
use crate::error::{Result, SslError};
use crate::seed;

pub use heads::{Aggregator, PretextHeads, Predictors, ProjectionHead};
pub use losses::{cross_entropy, info_nce, nt_xent, CrossEntropyOp, InfoNceOp, NtXentOp};
pub use train::{pretrain, write_trace_csv, PretextTrainer, PretrainConfig, PretrainOutcome, TraceRow};

pub const PRETEXT_PREFIX: &str = "pretext.";

/// Number of pseudo classes in transformation classification.
pub const N_TRANSFORMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    ClsTran,
    SimClr,
    Cpc,
    TsTcc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::ClsTran, Algorithm::SimClr, Algorithm::Cpc, Algorithm::TsTcc];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::ClsTran => "clstran",
            Algorithm::SimClr => "simclr",
            Algorithm::Cpc => "cpc",
            Algorithm::TsTcc => "tstcc",
        }
    }

    /// Batch size below which the objective has no negatives.
    pub fn min_batch(self) -> usize {
        match self {
            Algorithm::ClsTran => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s.to_ascii_lowercase())
            .ok_or_else(|| SslError::InvalidArgument(format!("unknown pretext algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    /// Share of feature timesteps summarized into the context.
    pub context_len_fraction: f64,
    pub k_future: usize,
    pub aggregator_hidden: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self { context_len_fraction: 0.5, k_future: 4, aggregator_hidden: 64 }
    }
}

impl CpcConfig {
    /// Context length for a feature map with `timesteps` steps.
    pub fn context_len(&self, timesteps: usize) -> Result<usize> {
        let ctx = (self.context_len_fraction * timesteps as f64).floor() as usize;
        if ctx == 0 || self.k_future == 0 || ctx + self.k_future > timesteps {
            return Err(SslError::InvalidArgument(format!(
                "{timesteps} timesteps cannot hold a context of {ctx} plus {} future steps",
                self.k_future
            )));
        }
        Ok(ctx)
    }
}

/// Objective hyperparameters (`pretext.*` in run configs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    pub tau: f64,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub clstran_hidden: usize,
    pub lambda_temporal: f64,
    pub lambda_contextual: f64,
    pub cpc: CpcConfig,
    pub augment: AugmentConfig,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            projection_hidden: 128,
            projection_dim: 128,
            clstran_hidden: 64,
            lambda_temporal: 1.0,
            lambda_contextual: 1.0,
            cpc: CpcConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SslError::InvalidArgument(format!("temperature {} must be positive", self.tau)));
        }
        if self.projection_dim == 0 || self.projection_hidden == 0 || self.clstran_hidden == 0 {
            return Err(SslError::InvalidArgument("head widths must be positive".into()));
        }
        if self.cpc.aggregator_hidden == 0 || !(self.cpc.context_len_fraction > 0.0 && self.cpc.context_len_fraction < 1.0) {
            return Err(SslError::InvalidArgument("cpc aggregator width and context fraction out of range".into()));
        }
        if self.lambda_temporal < 0.0 || self.lambda_contextual < 0.0 {
            return Err(SslError::InvalidArgument("loss weights must be non-negative".into()));
        }
        for k in self.augment.transformation_kinds() {
            k.validate()?;
        }
        Ok(())
    }
}

/// Per-batch diagnostics; fields not produced by an algorithm stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretextAux {
    pub pseudo_label_accuracy: Option<f64>,
    pub positive_similarity: Option<f64>,
    pub info_nce_per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextBatchResult {
    pub loss: f64,
    pub aux: PretextAux,
}

/// A built objective: the scalar loss node and its diagnostics.
#[derive(Debug, Clone)]
pub struct PretextStep {
    pub loss: Var,
    pub result: PretextBatchResult,
}

fn check_batch(x: &Tensor, min: usize) -> Result<()> {
    if x.dims() != 2 || x.dim(0) < min {
        return Err(SslError::InvalidArgument(format!(
            "pretext batch of shape {:?}; at least {min} epoch(s) required",
            x.shape()
        )));
    }
    Ok(())
}

fn finish(g: &Graph<'_>, loss: Var, aux: PretextAux) -> Result<PretextStep> {
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(SslError::Diverged { epoch: 0, loss: value });
    }
    Ok(PretextStep { loss, result: PretextBatchResult { loss: value, aux } })
}

/// Pseudo labels (transformation indices) for a batch of `n` epochs.
pub fn clstran_labels(n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = seed::rng(seed, &[seed::tag("clstran")]);
    (0..n).map(|_| rng.random_range(0..N_TRANSFORMS)).collect()
}

/// Applies one seeded transformation per epoch; returns the transformed
/// batch and the pseudo labels.
pub fn clstran_transform(x: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    check_batch(x, 1)?;
    let labels = clstran_labels(x.dim(0), seed);
    let kinds = cfg.transformation_kinds();
    let len = x.dim(1);
    let mut out = Vec::with_capacity(x.numel());
    for (i, &y) in labels.iter().enumerate() {
        let row = Tensor::from_vec(x.row(i).to_vec(), &[1, len])?;
        let spec = AugmentationSpec { kind: kinds[y], seed: seed::derive(seed, &[seed::tag("clstran-row"), i as u64]) };
        out.extend_from_slice(spec.apply(&row)?.data());
    }
    Ok((Tensor::from_vec(out, x.shape())?, labels))
}

fn pooled_features(g: &mut Graph<'_>, model: &Model, x: Var) -> Var {
    let f = model.encoder_forward(g, x);
    g.mean(f, 1)
}

/// Transformation classification: predict which of the four
/// transformations was applied to each epoch.
pub fn clstran_step(
    g: &mut Graph<'_>,
    model: &Model,
    head: &ProjectionHead,
    x: &Tensor,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<PretextStep> {
    let (xt, labels) = clstran_transform(x, cfg, seed)?;
    let xv = g.input(xt);
    let h = pooled_features(g, model, xv);
    let logits = head.forward(g, h);
    let pred = g.value(logits).argmax_rows();
    let correct = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let loss = g.custom(Box::new(CrossEntropyOp::new(labels.clone(), None)), &[logits]);
    let aux = PretextAux { pseudo_label_accuracy: Some(correct as f64 / labels.len() as f64), ..Default::default() };
    finish(g, loss, aux)
}

fn mean_row_dot(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dim(0);
    (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>())
        .sum::<f64>()
        / n.max(1) as f64
}

/// SimCLR on explicit views.
pub fn simclr_step_views(
    g: &mut Graph<'_>,
    model: &Model,
    head: &ProjectionHead,
    view_a: &Tensor,
    view_b: &Tensor,
    tau: f64,
) -> Result<PretextStep> {
    check_batch(view_a, 1)?;
    if view_a.shape() != view_b.shape() {
        return Err(SslError::Shape("views differ in shape".into()));
    }
    if !(tau > 0.0) {
        return Err(SslError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = view_a.dim(0);
    let both = Tensor::stack_rows(&[view_a, view_b])?;
    let xv = g.input(both);
    let h = pooled_features(g, model, xv);
    let z = head.forward(g, h);
    let z = g.l2_normalize(z);
    let za = g.narrow(z, 0, 0, n);
    let zb = g.narrow(z, 0, n, n);
    let pos = mean_row_dot(g.value(za), g.value(zb));
    let loss = g.custom(Box::new(NtXentOp::new(tau)), &[za, zb]);
    finish(g, loss, PretextAux { positive_similarity: Some(pos), ..Default::default() })
}

pub fn simclr_step(
    g: &mut Graph<'_>,
    model: &Model,
    head: &ProjectionHead,
    x: &Tensor,
    tau: f64,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<PretextStep> {
    check_batch(x, 1)?;
    let views = make_view_pair(x, ViewMode::Simclr, cfg, seed)?;
    simclr_step_views(g, model, head, &views.view_a, &views.view_b, tau)
}

/// Per-horizon InfoNCE of context `c: [B, h]` against future latents of
/// `z: [B, T, m1]`. Returns the mean-over-horizons node and each horizon's
/// value.
fn future_contrast(g: &mut Graph<'_>, pred: &Predictors, c: Var, z: Var, ctx: usize) -> (Var, Vec<f64>) {
    let s = g.shape(z);
    let (b, m1) = (s[0], s[2]);
    let mut total: Option<Var> = None;
    let mut per_step = Vec::with_capacity(pred.horizons());
    for k in 1..=pred.horizons() {
        let guess = pred.forward(g, k, c);
        let target = g.narrow(z, 1, ctx - 1 + k, 1);
        let target = g.reshape(target, &[b, m1]);
        let l = g.custom(Box::<InfoNceOp>::default(), &[guess, target]);
        per_step.push(g.value(l).item() as f64);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let mean = g.scale(total.expect("k_future > 0"), 1.0 / pred.horizons() as f32);
    (mean, per_step)
}

fn context(g: &mut Graph<'_>, agg: &Aggregator, z: Var, ctx: usize) -> Var {
    let past = g.narrow(z, 1, 0, ctx);
    agg.forward(g, past)
}

/// Contrastive predictive coding over the feature-map timesteps.
pub fn cpc_step(
    g: &mut Graph<'_>,
    model: &Model,
    agg: &Aggregator,
    pred: &Predictors,
    x: &Tensor,
    cfg: &CpcConfig,
) -> Result<PretextStep> {
    check_batch(x, 2)?;
    let ctx = cfg.context_len(model.dims().timesteps)?;
    if pred.horizons() != cfg.k_future {
        return Err(SslError::InvalidArgument("predictor count differs from k_future".into()));
    }
    let xv = g.input(x.clone());
    let z = model.encoder_forward(g, xv);
    let c = context(g, agg, z, ctx);
    let (loss, per_step) = future_contrast(g, pred, c, z, ctx);
    finish(g, loss, PretextAux { info_nce_per_step: per_step, ..Default::default() })
}

/// TS-TCC loss weights and settings bundled for the step function.
#[derive(Debug, Clone, Copy)]
pub struct TsTccWeights {
    pub temporal: f64,
    pub contextual: f64,
}

/// TS-TCC on explicit weak and strong views.
#[allow(clippy::too_many_arguments)]
pub fn tstcc_step_views(
    g: &mut Graph<'_>,
    model: &Model,
    agg: &Aggregator,
    pred: &Predictors,
    proj: &ProjectionHead,
    weak: &Tensor,
    strong: &Tensor,
    tau: f64,
    cfg: &CpcConfig,
    weights: TsTccWeights,
) -> Result<PretextStep> {
    check_batch(weak, 2)?;
    if weak.shape() != strong.shape() {
        return Err(SslError::Shape("views differ in shape".into()));
    }
    if !(tau > 0.0) {
        return Err(SslError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let ctx = cfg.context_len(model.dims().timesteps)?;
    let n = weak.dim(0);
    let xv = g.input(Tensor::stack_rows(&[weak, strong])?);
    let z = model.encoder_forward(g, xv);
    let zw = g.narrow(z, 0, 0, n);
    let zs = g.narrow(z, 0, n, n);
    let cw = context(g, agg, zw, ctx);
    let cs = context(g, agg, zs, ctx);
    // each view's context predicts the other view's future
    let (t_sw, steps_sw) = future_contrast(g, pred, cs, zw, ctx);
    let (t_ws, steps_ws) = future_contrast(g, pred, cw, zs, ctx);
    let temporal = g.add(t_sw, t_ws);
    let temporal = g.scale(temporal, 0.5);
    let pw = proj.forward(g, cw);
    let pw = g.l2_normalize(pw);
    let ps = proj.forward(g, cs);
    let ps = g.l2_normalize(ps);
    let pos = mean_row_dot(g.value(pw), g.value(ps));
    let contextual = g.custom(Box::new(NtXentOp::new(tau)), &[pw, ps]);
    let a = g.scale(temporal, weights.temporal as f32);
    let b = g.scale(contextual, weights.contextual as f32);
    let loss = g.add(a, b);
    let per_step = steps_sw.iter().zip(&steps_ws).map(|(a, b)| 0.5 * (a + b)).collect();
    finish(g, loss, PretextAux { positive_similarity: Some(pos), info_nce_per_step: per_step, ..Default::default() })
}

#[allow(clippy::too_many_arguments)]
pub fn tstcc_step(
    g: &mut Graph<'_>,
    model: &Model,
    agg: &Aggregator,
    pred: &Predictors,
    proj: &ProjectionHead,
    x: &Tensor,
    cfg: &PretextConfig,
    seed: u64,
) -> Result<PretextStep> {
    check_batch(x, 2)?;
    let views = make_view_pair(x, ViewMode::Tstcc, &cfg.augment, seed)?;
    let weights = TsTccWeights { temporal: cfg.lambda_temporal, contextual: cfg.lambda_contextual };
    tstcc_step_views(g, model, agg, pred, proj, &views.view_a, &views.view_b, cfg.tau, &cfg.cpc, weights)
}

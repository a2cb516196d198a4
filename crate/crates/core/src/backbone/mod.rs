//! Sleep-staging networks as (feature extractor, temporal encoder,
//! classifier) triples.
//!
//! Parameters live in one [`ParamStore`] under the prefixes `fe.`, `te.`
//! and `clf.`; pretext heads attach further prefixes and are never part of
//! an encoder checkpoint.

mod encoder;
mod spec;
mod temporal;

use serde::{Deserialize, Serialize};
use sleepssl_nn::{Checkpoint, Graph, Linear, ParamStore, Tensor, Var};

pub use spec::{
    AttnSleepConfig, BackboneKind, Cnn1dConfig, DeepSleepNetConfig, ModelSpec, Preset, TeKind, TeMode, TemporalConfig,
};
pub use temporal::effective_heads;

use crate::error::{Result, SslError};
use crate::seed;
use encoder::Encoder;
use temporal::Temporal;

pub const FE_PREFIX: &str = "fe.";
pub const TE_PREFIX: &str = "te.";
pub const CLF_PREFIX: &str = "clf.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub feature_extractor: usize,
    pub temporal_encoder: usize,
    pub classifier: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub timesteps: usize,
    /// Feature-map width.
    pub m1: usize,
    /// Context-vector width.
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    encoder: Encoder,
    temporal: Temporal,
    classifier: Linear,
    dims: ModelDims,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let fs = spec.sampling_rate_hz as usize;
        let mut rng = seed::rng(seed, &[seed::tag("fe")]);
        let encoder = match spec.backbone {
            BackboneKind::Cnn1d => Encoder::cnn1d(&mut store, &spec.cnn1d, &mut rng),
            BackboneKind::DeepSleepNet => Encoder::deepsleepnet(&mut store, &spec.deepsleepnet, fs, &mut rng),
            BackboneKind::AttnSleep => Encoder::attnsleep(&mut store, &spec.attnsleep, fs, &mut rng),
        };
        let (timesteps, m1) = encoder.output_dims(spec.input_len)?;
        if timesteps < 2 {
            return Err(SslError::ModelSpec(format!(
                "input_len {} leaves {timesteps} feature timestep(s); at least 2 are required",
                spec.input_len
            )));
        }
        let mut rng = seed::rng(seed, &[seed::tag("te")]);
        let temporal = Temporal::new(&mut store, spec.te, m1, &spec.temporal, &mut rng);
        let m = temporal.out_dim(m1);
        let mut rng = seed::rng(seed, &[seed::tag("clf")]);
        let classifier = Linear::new(&mut store, "clf", m, spec.n_classes, true, &mut rng);
        Ok(Self { spec: spec.clone(), store, encoder, temporal, classifier, dims: ModelDims { timesteps, m1, m } })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) {
        let s = g.shape(x);
        assert!(
            s.len() == 2 && s[1] == self.spec.input_len,
            "model expects [B, {}] input, got {s:?}",
            self.spec.input_len
        );
    }

    /// `x: [B, input_len]` to the feature map `[B, T, m1]`.
    pub fn encoder_forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.check_input(g, x);
        self.encoder.forward(g, x)
    }

    /// Feature map to per-timestep temporal-encoder outputs `[B, T, m]`.
    pub fn temporal_sequence(&self, g: &mut Graph<'_>, f: Var) -> Var {
        self.temporal.sequence(g, f)
    }

    /// Feature map to the context vector `[B, m]`.
    pub fn temporal_forward(&self, g: &mut Graph<'_>, f: Var) -> Var {
        self.temporal.forward(g, f)
    }

    /// Context vector to class logits `[B, n_classes]`.
    pub fn classifier_forward(&self, g: &mut Graph<'_>, c: Var) -> Var {
        self.classifier.forward(g, c)
    }

    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.encoder_forward(g, x);
        let c = self.temporal_forward(g, f);
        self.classifier_forward(g, c)
    }

    /// Evaluation-mode logits for `x: [N, input_len]`, in chunks of `batch`.
    pub fn predict_logits(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        if x.dims() != 2 || x.dim(1) != self.spec.input_len {
            return Err(SslError::Shape(format!(
                "expected [N, {}] epochs, got {:?}",
                self.spec.input_len,
                x.shape()
            )));
        }
        let n = x.dim(0);
        let mut out = Vec::with_capacity(n * self.spec.n_classes);
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(batch.max(1)) {
            let mut g = Graph::eval(&self.store);
            let xv = g.input(x.select_rows(chunk));
            let y = self.logits(&mut g, xv);
            out.extend_from_slice(g.value(y).data());
        }
        Ok(Tensor::from_vec(out, &[n, self.spec.n_classes])?)
    }

    /// Evaluation-mode feature map for `x: [N, input_len]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != 2 || x.dim(1) != self.spec.input_len {
            return Err(SslError::Shape(format!("expected [N, {}] epochs, got {:?}", self.spec.input_len, x.shape())));
        }
        let mut g = Graph::eval(&self.store);
        let xv = g.input(x.clone());
        let f = self.encoder_forward(&mut g, xv);
        Ok(g.value(f).clone())
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let feature_extractor = self.store.count_trainable(FE_PREFIX);
        let temporal_encoder = self.store.count_trainable(TE_PREFIX);
        let classifier = self.store.count_trainable(CLF_PREFIX);
        ParamCounts {
            feature_extractor,
            temporal_encoder,
            classifier,
            total: feature_extractor + temporal_encoder + classifier,
        }
    }

    /// Feature-extractor tensors (including normalization buffers) with the
    /// spec in the metadata.
    pub fn encoder_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::json!({ "kind": "encoder", "model_spec": serde_json::to_value(&self.spec)? }),
            tensors: self.store.export(FE_PREFIX),
        })
    }

    pub fn full_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.store.export(FE_PREFIX);
        tensors.extend(self.store.export(TE_PREFIX));
        tensors.extend(self.store.export(CLF_PREFIX));
        Ok(Checkpoint {
            meta: serde_json::json!({ "kind": "model", "model_spec": serde_json::to_value(&self.spec)? }),
            tensors,
        })
    }

    /// Overwrites the feature extractor with `ckpt`'s tensors.
    pub fn load_encoder(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let spec: ModelSpec = serde_json::from_value(
            ckpt.meta
                .get("model_spec")
                .cloned()
                .ok_or_else(|| SslError::ModelSpec("checkpoint has no model_spec".into()))?,
        )?;
        if !spec.encoder_compatible(&self.spec) {
            return Err(SslError::ModelSpec(format!(
                "checkpoint encoder ({}, input_len {}) does not match model ({}, input_len {})",
                spec.backbone, spec.input_len, self.spec.backbone, self.spec.input_len
            )));
        }
        if let Some(t) = ckpt.tensors.iter().find(|t| !t.name.starts_with(FE_PREFIX)) {
            return Err(SslError::ModelSpec(format!("encoder checkpoint holds non-encoder tensor `{}`", t.name)));
        }
        let expected = self.store.export(FE_PREFIX).len();
        if ckpt.tensors.len() != expected {
            return Err(SslError::ModelSpec(format!(
                "encoder checkpoint has {} tensors, model expects {expected}",
                ckpt.tensors.len()
            )));
        }
        self.store.import(&ckpt.tensors)?;
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_value(
            ckpt.meta
                .get("model_spec")
                .cloned()
                .ok_or_else(|| SslError::ModelSpec("checkpoint has no model_spec".into()))?,
        )?;
        let mut model = Model::build(&spec, 0)?;
        model.store.import(&ckpt.tensors)?;
        Ok(model)
    }
}

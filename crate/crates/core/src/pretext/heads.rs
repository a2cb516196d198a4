use rand::Rng;
use sleepssl_nn::{Graph, Linear, Lstm, ParamStore, Tensor, Var};

use super::{
    clstran_step, cpc_step, simclr_step, tstcc_step, Algorithm, PretextConfig, PretextStep, N_TRANSFORMS,
};
use crate::backbone::Model;
use crate::error::Result;
use crate::seed;

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Unidirectional single-layer LSTM summarizing past latents; the context
/// is the state at the last step.
#[derive(Debug, Clone)]
pub struct Aggregator {
    lstm: Lstm,
}

impl Aggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self { lstm: Lstm::new(store, name, input, hidden, 1, false, rng) }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    /// `[B, t, m1]` to `[B, hidden]`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let s = g.shape(z);
        let h = self.lstm.forward(g, z);
        let last = g.narrow(h, 1, s[1] - 1, 1);
        g.reshape(last, &[s[0], self.lstm.hidden])
    }
}

/// One linear map per future horizon, from context to latent space.
#[derive(Debug, Clone)]
pub struct Predictors(Vec<Linear>);

impl Predictors {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, context: usize, latent: usize, k: usize, rng: &mut R) -> Self {
        Self((1..=k).map(|h| Linear::new(store, &format!("{name}.k{h}"), context, latent, true, rng)).collect())
    }

    pub fn horizons(&self) -> usize {
        self.0.len()
    }

    /// Guess for horizon `k` (1-based).
    pub fn forward(&self, g: &mut Graph<'_>, k: usize, c: Var) -> Var {
        self.0[k - 1].forward(g, c)
    }
}

/// The algorithm-specific modules trained alongside the encoder.
#[derive(Debug, Clone)]
pub enum PretextHeads {
    ClsTran { classifier: ProjectionHead },
    SimClr { projection: ProjectionHead },
    Cpc { aggregator: Aggregator, predictors: Predictors },
    TsTcc { aggregator: Aggregator, predictors: Predictors, projection: ProjectionHead },
}

impl PretextHeads {
    /// Adds freshly initialized heads to `model`'s parameter store.
    pub fn attach(model: &mut Model, algorithm: Algorithm, cfg: &PretextConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dims = model.dims();
        if matches!(algorithm, Algorithm::Cpc | Algorithm::TsTcc) {
            cfg.cpc.context_len(dims.timesteps)?;
        }
        let mut rng = seed::rng(seed, &[seed::tag("pretext-heads"), seed::tag(algorithm.id())]);
        let store = model.store_mut();
        let h = cfg.cpc.aggregator_hidden;
        Ok(match algorithm {
            Algorithm::ClsTran => PretextHeads::ClsTran {
                classifier: ProjectionHead::new(store, "pretext.clstran", dims.m1, cfg.clstran_hidden, N_TRANSFORMS, &mut rng),
            },
            Algorithm::SimClr => PretextHeads::SimClr {
                projection: ProjectionHead::new(
                    store,
                    "pretext.projection",
                    dims.m1,
                    cfg.projection_hidden,
                    cfg.projection_dim,
                    &mut rng,
                ),
            },
            Algorithm::Cpc => PretextHeads::Cpc {
                aggregator: Aggregator::new(store, "pretext.aggregator", dims.m1, h, &mut rng),
                predictors: Predictors::new(store, "pretext.predictor", h, dims.m1, cfg.cpc.k_future, &mut rng),
            },
            Algorithm::TsTcc => PretextHeads::TsTcc {
                aggregator: Aggregator::new(store, "pretext.aggregator", dims.m1, h, &mut rng),
                predictors: Predictors::new(store, "pretext.predictor", h, dims.m1, cfg.cpc.k_future, &mut rng),
                projection: ProjectionHead::new(
                    store,
                    "pretext.projection",
                    h,
                    cfg.projection_hidden,
                    cfg.projection_dim,
                    &mut rng,
                ),
            },
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            PretextHeads::ClsTran { .. } => Algorithm::ClsTran,
            PretextHeads::SimClr { .. } => Algorithm::SimClr,
            PretextHeads::Cpc { .. } => Algorithm::Cpc,
            PretextHeads::TsTcc { .. } => Algorithm::TsTcc,
        }
    }

    /// Builds this algorithm's objective on batch `x`.
    pub fn step(&self, g: &mut Graph<'_>, model: &Model, x: &Tensor, cfg: &PretextConfig, seed: u64) -> Result<PretextStep> {
        match self {
            PretextHeads::ClsTran { classifier } => clstran_step(g, model, classifier, x, &cfg.augment, seed),
            PretextHeads::SimClr { projection } => simclr_step(g, model, projection, x, cfg.tau, &cfg.augment, seed),
            PretextHeads::Cpc { aggregator, predictors } => cpc_step(g, model, aggregator, predictors, x, &cfg.cpc),
            PretextHeads::TsTcc { aggregator, predictors, projection } => {
                tstcc_step(g, model, aggregator, predictors, projection, x, cfg, seed)
            }
        }
    }
}

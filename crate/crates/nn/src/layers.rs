//! Parameterized building blocks. Each layer only holds [`ParamId`]s; the
//! tensors live in the [`ParamStore`] it was registered with.
//!
//! Initialization follows the PyTorch defaults (uniform in
//! `±1/sqrt(fan_in)` for affine maps, `±1/sqrt(hidden)` for recurrent
//! weights, unit scale / zero shift for normalization layers).

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    bound: f32,
    rng: &mut R,
) -> ParamId {
    store.add(name, Tensor::uniform(shape, -bound, bound, rng), true)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = uniform_param(store, format!("{name}.weight"), &[out_dim, in_dim], bound, rng);
        let bias = bias.then(|| uniform_param(store, format!("{name}.bias"), &[out_dim], bound, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f32).sqrt();
        let weight = uniform_param(store, format!("{name}.weight"), &[c_out, c_in, kernel], bound, rng);
        let bias = bias.then(|| uniform_param(store, format!("{name}.bias"), &[c_out], bound, rng));
        Self { weight, bias, stride, pad, kernel, c_in, c_out }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.momentum, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, self.eps)
    }
}

#[derive(Debug, Clone)]
struct LstmDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

/// Multi-layer, optionally bidirectional LSTM over `[B, T, I]` inputs.
/// Bidirectional outputs concatenate forward and backward states.
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<Vec<LstmDirection>>,
    pub hidden: usize,
    pub bidirectional: bool,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let dirs = if bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input } else { hidden * dirs };
            let mut layer = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let sfx = if d == 1 { "_reverse" } else { "" };
                layer.push(LstmDirection {
                    w_ih: uniform_param(store, format!("{name}.weight_ih_l{l}{sfx}"), &[4 * hidden, in_dim], bound, rng),
                    w_hh: uniform_param(store, format!("{name}.weight_hh_l{l}{sfx}"), &[4 * hidden, hidden], bound, rng),
                    b_ih: uniform_param(store, format!("{name}.bias_ih_l{l}{sfx}"), &[4 * hidden], bound, rng),
                    b_hh: uniform_param(store, format!("{name}.bias_hh_l{l}{sfx}"), &[4 * hidden], bound, rng),
                });
            }
            layers.push(layer);
        }
        Self { layers, hidden, bidirectional }
    }

    pub fn out_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let outs: Vec<Var> = layer
                .iter()
                .enumerate()
                .map(|(d, dir)| {
                    let (wi, wh) = (g.param(dir.w_ih), g.param(dir.w_hh));
                    let (bi, bh) = (g.param(dir.b_ih), g.param(dir.b_hh));
                    g.lstm(h, wi, wh, bi, bh, d == 1)
                })
                .collect();
            h = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2) };
        }
        h
    }
}

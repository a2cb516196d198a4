//! Temporal encoders over `[B, T, m1]` feature maps.

use rand::Rng;
use sleepssl_nn::{Graph, LayerNorm, Linear, Lstm, ParamStore, ParamId, Tensor, Var};

use super::spec::{TeKind, TemporalConfig};

/// Largest head count not above `wanted` that divides `dim`.
pub fn effective_heads(dim: usize, wanted: usize) -> usize {
    (1..=wanted.min(dim)).rev().find(|h| dim % h == 0).unwrap_or(1)
}

/// Convolution over time that only sees the current and earlier steps.
#[derive(Debug, Clone)]
pub(crate) struct CausalConv {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
}

impl CausalConv {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((dim * kernel) as f32).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[dim, dim, kernel], -bound, bound, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::uniform(&[dim], -bound, bound, rng), true),
            kernel,
        }
    }

    /// `[B, T, d]` to `[B, T, d]`.
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let t = g.shape(x)[1];
        let xt = g.permute(x, &[0, 2, 1]);
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.conv1d(xt, w, Some(b), 1, self.kernel - 1);
        let y = g.narrow(y, 2, 0, t);
        g.permute(y, &[0, 2, 1])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnLayer {
    norm1: LayerNorm,
    q: CausalConv,
    k: CausalConv,
    v: CausalConv,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) enum Temporal {
    BilstmResidual { lstm: Lstm, skip: Linear, dropout: f32 },
    CausalAttention { layers: Vec<AttnLayer>, norm: LayerNorm, heads: usize, dropout: f32 },
    Identity,
}

impl Temporal {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, kind: TeKind, m1: usize, cfg: &TemporalConfig, rng: &mut R) -> Self {
        match kind {
            TeKind::BilstmResidual => Temporal::BilstmResidual {
                lstm: Lstm::new(store, "te.lstm", m1, cfg.lstm_hidden, cfg.lstm_layers, true, rng),
                skip: Linear::new(store, "te.skip", m1, 2 * cfg.lstm_hidden, true, rng),
                dropout: cfg.dropout,
            },
            TeKind::CausalAttention => {
                let layers = (0..cfg.attn_layers)
                    .map(|i| {
                        let n = format!("te.layer{i}");
                        AttnLayer {
                            norm1: LayerNorm::new(store, &format!("{n}.norm1"), m1),
                            q: CausalConv::new(store, &format!("{n}.q"), m1, cfg.attn_kernel, rng),
                            k: CausalConv::new(store, &format!("{n}.k"), m1, cfg.attn_kernel, rng),
                            v: CausalConv::new(store, &format!("{n}.v"), m1, cfg.attn_kernel, rng),
                            out: Linear::new(store, &format!("{n}.out"), m1, m1, true, rng),
                            norm2: LayerNorm::new(store, &format!("{n}.norm2"), m1),
                            ff1: Linear::new(store, &format!("{n}.ff1"), m1, cfg.attn_ff, true, rng),
                            ff2: Linear::new(store, &format!("{n}.ff2"), cfg.attn_ff, m1, true, rng),
                        }
                    })
                    .collect();
                Temporal::CausalAttention {
                    layers,
                    norm: LayerNorm::new(store, "te.norm", m1),
                    heads: effective_heads(m1, cfg.attn_heads),
                    dropout: cfg.dropout,
                }
            }
            TeKind::Identity => Temporal::Identity,
        }
    }

    pub(crate) fn out_dim(&self, m1: usize) -> usize {
        match self {
            Temporal::BilstmResidual { lstm, .. } => lstm.out_dim(),
            Temporal::CausalAttention { .. } | Temporal::Identity => m1,
        }
    }

    /// Per-timestep outputs `[B, T, m]` before pooling.
    pub(crate) fn sequence(&self, g: &mut Graph<'_>, f: Var) -> Var {
        match self {
            Temporal::BilstmResidual { lstm, skip, dropout } => {
                let h = lstm.forward(g, f);
                let s = skip.forward(g, f);
                let y = g.add(h, s);
                g.dropout(y, *dropout)
            }
            Temporal::CausalAttention { layers, norm, heads, dropout } => {
                let mut x = f;
                for l in layers {
                    let y = l.norm1.forward(g, x);
                    let a = attention(g, l, y, *heads);
                    let a = l.out.forward(g, a);
                    let a = g.dropout(a, *dropout);
                    x = g.add(x, a);
                    let y = l.norm2.forward(g, x);
                    let y = l.ff1.forward(g, y);
                    let y = g.relu(y);
                    let y = g.dropout(y, *dropout);
                    let y = l.ff2.forward(g, y);
                    let y = g.dropout(y, *dropout);
                    x = g.add(x, y);
                }
                norm.forward(g, x)
            }
            Temporal::Identity => f,
        }
    }

    /// Context vector `[B, m]`: timestep mean of [`Temporal::sequence`].
    pub(crate) fn forward(&self, g: &mut Graph<'_>, f: Var) -> Var {
        let s = self.sequence(g, f);
        g.mean(s, 1)
    }
}

fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Var {
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    let y = g.reshape(x, &[b, t, heads, d / heads]);
    let y = g.permute(y, &[0, 2, 1, 3]);
    g.reshape(y, &[b * heads, t, d / heads])
}

fn attention(g: &mut Graph<'_>, l: &AttnLayer, x: Var, heads: usize) -> Var {
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    let q = l.q.forward(g, x);
    let k = l.k.forward(g, x);
    let v = l.v.forward(g, x);
    let (q, k, v) = (split_heads(g, q, heads), split_heads(g, k, heads), split_heads(g, v, heads));
    let scores = g.bmm(q, k, true);
    let scores = g.scale(scores, 1.0 / ((d / heads) as f32).sqrt());
    let p = g.softmax(scores, true);
    let y = g.bmm(p, v, false);
    let y = g.reshape(y, &[b, heads, t, d / heads]);
    let y = g.permute(y, &[0, 2, 1, 3]);
    g.reshape(y, &[b, t, d])
}

//! Feature extractors. Each maps `[B, L]` epochs to a `[B, T, m1]` feature
//! map whose time axis is the convolutional output length.

use rand::Rng;
use sleepssl_nn::kernels::pool::pool_out_len;
use sleepssl_nn::{BatchNorm1d, Conv1d, Graph, Linear, ParamStore, Var};

use super::spec::{AttnSleepConfig, Cnn1dConfig, DeepSleepNetConfig};
use crate::error::{Result, SslError};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Act {
    Relu,
    Gelu,
}

fn conv_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (len + 2 * p >= k && s > 0).then(|| (len + 2 * p - k) / s + 1)
}

#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    conv: Conv1d,
    bn: BatchNorm1d,
    act: Option<Act>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        act: Option<Act>,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv1d::new(store, &format!("{name}.conv"), c_in, c_out, k, s, p, false, rng),
            bn: BatchNorm1d::new(store, &format!("{name}.bn"), c_out),
            act,
        }
    }

    fn out_len(&self, len: usize) -> Option<usize> {
        conv_len(len, self.conv.kernel, self.conv.stride, self.conv.pad)
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        match self.act {
            Some(Act::Relu) => g.relu(y),
            Some(Act::Gelu) => g.gelu(y),
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Pool {
    k: usize,
    s: usize,
    p: usize,
}

impl Pool {
    fn out_len(&self, len: usize) -> Option<usize> {
        pool_out_len(len, self.k, self.s, self.p)
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.max_pool1d(x, self.k, self.s, self.p)
    }
}

/// A chain of conv blocks, pools and dropouts over `[B, C, L]`.
#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(ConvBn),
    Pool(Pool),
    Dropout(f32),
}

#[derive(Debug, Clone)]
pub(crate) struct Branch(Vec<Layer>);

impl Branch {
    fn out_len(&self, mut len: usize) -> Option<usize> {
        for l in &self.0 {
            len = match l {
                Layer::Conv(c) => c.out_len(len)?,
                Layer::Pool(p) => p.out_len(len)?,
                Layer::Dropout(_) => len,
            };
            if len == 0 {
                return None;
            }
        }
        Some(len)
    }

    fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Var {
        for l in &self.0 {
            x = match l {
                Layer::Conv(c) => c.forward(g, x),
                Layer::Pool(p) => p.forward(g, x),
                Layer::Dropout(p) => g.dropout(x, *p),
            };
        }
        x
    }
}

/// Squeeze-excitation residual block reducing `c_in` channels to `planes`.
#[derive(Debug, Clone)]
pub(crate) struct SeBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    fc1: Linear,
    fc2: Linear,
    downsample: ConvBn,
}

impl SeBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, planes: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (planes / reduction).max(1);
        Self {
            conv1: ConvBn::new(store, &format!("{name}.conv1"), c_in, planes, 1, 1, 0, Some(Act::Relu), rng),
            conv2: ConvBn::new(store, &format!("{name}.conv2"), planes, planes, 1, 1, 0, None, rng),
            fc1: Linear::new(store, &format!("{name}.se.fc1"), planes, hidden, false, rng),
            fc2: Linear::new(store, &format!("{name}.se.fc2"), hidden, planes, false, rng),
            downsample: ConvBn::new(store, &format!("{name}.downsample"), c_in, planes, 1, 1, 0, None, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        let squeeze = g.mean(y, 2);
        let s = self.fc1.forward(g, squeeze);
        let s = g.relu(s);
        let s = self.fc2.forward(g, s);
        let s = g.sigmoid(s);
        let y = g.scale_channels(y, s);
        let r = self.downsample.forward(g, x);
        let y = g.add(y, r);
        g.relu(y)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Encoder {
    Cnn1d { body: Branch, channels: usize },
    DeepSleepNet { small: Branch, large: Branch, dropout: f32, channels: usize },
    AttnSleep { fine: Branch, coarse: Branch, dropout: f32, afr: SeBlock, channels: usize },
}

fn shape_error(what: &str, len: usize) -> SslError {
    SslError::ModelSpec(format!("input_len {len} is too short for the {what} pooling arithmetic"))
}

impl Encoder {
    pub(crate) fn cnn1d<R: Rng>(store: &mut ParamStore, cfg: &Cnn1dConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let pool = Layer::Pool(Pool { k: 2, s: 2, p: 1 });
        let k = cfg.kernel;
        let body = vec![
            Layer::Conv(ConvBn::new(
                store,
                "fe.block1",
                1,
                c1,
                cfg.first_kernel,
                cfg.first_stride,
                cfg.first_kernel / 2,
                Some(Act::Relu),
                rng,
            )),
            pool.clone(),
            Layer::Dropout(cfg.dropout),
            Layer::Conv(ConvBn::new(store, "fe.block2", c1, c2, k, 1, k / 2, Some(Act::Relu), rng)),
            pool.clone(),
            Layer::Conv(ConvBn::new(store, "fe.block3", c2, c3, k, 1, k / 2, Some(Act::Relu), rng)),
            pool,
        ];
        Encoder::Cnn1d { body: Branch(body), channels: c3 }
    }

    pub(crate) fn deepsleepnet<R: Rng>(store: &mut ParamStore, cfg: &DeepSleepNetConfig, fs: usize, rng: &mut R) -> Self {
        let (f1, f2) = (cfg.first_filters, cfg.filters);
        let mut branch = |name: &str, k0: usize, s0: usize, pool0: usize, k: usize, pool1: usize| {
            let mut layers = vec![
                Layer::Conv(ConvBn::new(store, &format!("fe.{name}.conv0"), 1, f1, k0, s0, k0 / 2, Some(Act::Relu), rng)),
                Layer::Pool(Pool { k: pool0, s: pool0, p: 0 }),
                Layer::Dropout(cfg.dropout),
            ];
            for i in 0..cfg.n_convs {
                let c_in = if i == 0 { f1 } else { f2 };
                layers.push(Layer::Conv(ConvBn::new(
                    store,
                    &format!("fe.{name}.conv{}", i + 1),
                    c_in,
                    f2,
                    k,
                    1,
                    k / 2,
                    Some(Act::Relu),
                    rng,
                )));
            }
            layers.push(Layer::Pool(Pool { k: pool1, s: pool1, p: 0 }));
            Branch(layers)
        };
        let small = branch("small", (fs / 2).max(2), (fs / 16).max(1), 8, 8, 4);
        let large = branch("large", (4 * fs).max(4), (fs / 2).max(1), 4, 6, 2);
        Encoder::DeepSleepNet { small, large, dropout: cfg.dropout, channels: f2 }
    }

    pub(crate) fn attnsleep<R: Rng>(store: &mut ParamStore, cfg: &AttnSleepConfig, fs: usize, rng: &mut R) -> Self {
        let (f1, f2) = (cfg.first_filters, cfg.filters);
        let gelu = Some(Act::Gelu);
        let mut branch = |name: &str, k0: usize, s0: usize, pool0: Pool, k: usize, pool1: Pool| {
            Branch(vec![
                Layer::Conv(ConvBn::new(store, &format!("fe.{name}.conv0"), 1, f1, k0, s0, k0 / 2, gelu, rng)),
                Layer::Pool(pool0),
                Layer::Dropout(cfg.dropout),
                Layer::Conv(ConvBn::new(store, &format!("fe.{name}.conv1"), f1, f2, k, 1, k / 2, gelu, rng)),
                Layer::Conv(ConvBn::new(store, &format!("fe.{name}.conv2"), f2, f2, k, 1, k / 2, gelu, rng)),
                Layer::Pool(pool1),
            ])
        };
        let fine = branch(
            "fine",
            (fs / 2).max(2),
            (6 * fs / 100).max(1),
            Pool { k: 8, s: 2, p: 4 },
            8,
            Pool { k: 4, s: 4, p: 2 },
        );
        let coarse = branch(
            "coarse",
            (4 * fs).max(4),
            (fs / 2).max(1),
            Pool { k: 4, s: 2, p: 2 },
            7,
            Pool { k: 2, s: 2, p: 1 },
        );
        let afr = SeBlock::new(store, "fe.afr", f2, cfg.afr_channels, cfg.se_reduction, rng);
        Encoder::AttnSleep { fine, coarse, dropout: cfg.dropout, afr, channels: cfg.afr_channels }
    }

    /// `(timesteps, channels)` of the feature map for input length `len`.
    pub(crate) fn output_dims(&self, len: usize) -> Result<(usize, usize)> {
        match self {
            Encoder::Cnn1d { body, channels } => {
                let t = body.out_len(len).ok_or_else(|| shape_error("cnn1d", len))?;
                Ok((t, *channels))
            }
            Encoder::DeepSleepNet { small, large, channels, .. } => {
                let a = small.out_len(len).ok_or_else(|| shape_error("deepsleepnet", len))?;
                let b = large.out_len(len).ok_or_else(|| shape_error("deepsleepnet", len))?;
                Ok((a + b, *channels))
            }
            Encoder::AttnSleep { fine, coarse, channels, .. } => {
                let a = fine.out_len(len).ok_or_else(|| shape_error("attnsleep", len))?;
                let b = coarse.out_len(len).ok_or_else(|| shape_error("attnsleep", len))?;
                Ok((a + b, *channels))
            }
        }
    }

    /// `x: [B, L]` to `[B, T, m1]`.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let shape = g.shape(x);
        let x = g.reshape(x, &[shape[0], 1, shape[1]]);
        let y = match self {
            Encoder::Cnn1d { body, .. } => body.forward(g, x),
            Encoder::DeepSleepNet { small, large, dropout, .. } => {
                let a = small.forward(g, x);
                let b = large.forward(g, x);
                let y = g.concat(&[a, b], 2);
                g.dropout(y, *dropout)
            }
            Encoder::AttnSleep { fine, coarse, dropout, afr, .. } => {
                let a = fine.forward(g, x);
                let b = coarse.forward(g, x);
                let y = g.concat(&[a, b], 2);
                let y = g.dropout(y, *dropout);
                afr.forward(g, y)
            }
        };
        g.permute(y, &[0, 2, 1])
    }
}

//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably for the duration of one
//! forward/backward pass. Shape errors inside graph operations are
//! programming errors and panic; callers validate user-facing inputs first.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gemm::{gemm, MatRef};
use crate::kernels::conv::{conv1d_backward, conv1d_forward, ConvGeom};
use crate::kernels::lstm::{lstm_backward, lstm_forward, LstmCache, LstmGeom};
use crate::kernels::norm::{self, NormCache};
use crate::kernels::pool::{max_pool_backward, max_pool_forward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation implemented outside this crate.
pub trait CustomOp {
    /// Computes the output; may cache intermediates for `backward`.
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor;
    /// Gradients with respect to each input given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    ScaleChannels(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f32>, out_len: usize },
    MaxPool { x: Var, arg: Vec<u32>, rows: usize, len: usize, out_len: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache, dims: [usize; 3], batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout { x: Var, mask: Vec<f32> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<f32> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, geom: LstmGeom, cache: LstmCache },
    SumAll(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it participated.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.nodes[v.0].as_ref().map(|t| (id, t)))
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

fn permute_data(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<'s> Graph<'s> {
    /// A training-mode graph (batch statistics, active dropout).
    pub fn train(store: &'s ParamStore, seed: u64) -> Self {
        Self::with_mode(store, true, seed)
    }

    /// An evaluation-mode graph (running statistics, no dropout).
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false, 0)
    }

    fn with_mode(store: &'s ParamStore, train: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// A constant input (no gradient is propagated into it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is recorded (for gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.store.entry(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Pending running-statistic updates produced in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(data, ta.shape()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.numel();
        assert_eq!(*tx.shape().last().unwrap(), n, "bias length mismatch");
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `x[b, c, l] * s[b, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(tx.dims(), 3);
        assert_eq!(ts.shape(), &tx.shape()[..2], "channel scale shape mismatch");
        let l = tx.dim(2);
        let mut out = tx.clone();
        for (row, &sv) in out.data_mut().chunks_mut(l).zip(ts.data()) {
            for o in row.iter_mut() {
                *o *= sv;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::ScaleChannels(x, s), rg)
    }

    /// `x[.., in] @ w[out, in]^T + b[out]`, applied over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (out_dim, in_dim) = (tw.dim(0), tw.dim(1));
        assert_eq!(*tx.shape().last().unwrap(), in_dim, "linear input dim mismatch");
        let rows = tx.numel() / in_dim;
        let mut out = vec![0.0f32; rows * out_dim];
        gemm(1.0, MatRef::new(tx.data(), rows, in_dim), MatRef::t(tw.data(), in_dim, out_dim), 0.0, &mut out);
        if let Some(b) = b {
            let tb = self.value(b);
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let t = Tensor::from_vec(out, &shape).expect("linear shape");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// Batched `a[B, m, k] @ b[B, k, n]` (or `b[B, n, k]^T` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.dims() == 3 && tb.dims() == 3 && ta.dim(0) == tb.dim(0));
        let (bs, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
        let n = if trans_b { tb.dim(1) } else { tb.dim(2) };
        assert_eq!(if trans_b { tb.dim(2) } else { tb.dim(1) }, k, "bmm inner dim mismatch");
        let mut out = vec![0.0f32; bs * m * n];
        for i in 0..bs {
            let am = MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k);
            let bd = &tb.data()[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { MatRef::t(bd, k, n) } else { MatRef::new(bd, k, n) };
            gemm(1.0, am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let t = Tensor::from_vec(out, &[bs, m, n]).expect("bmm shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    /// `x[B, C_in, L]` convolved with `w[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.dims(), 3, "conv1d expects [B, C, L]");
        assert_eq!(tx.dim(1), tw.dim(1), "conv1d channel mismatch");
        let geom = ConvGeom {
            batch: tx.dim(0),
            c_in: tx.dim(1),
            len: tx.dim(2),
            c_out: tw.dim(0),
            kernel: tw.dim(2),
            stride,
            pad,
        };
        assert!(geom.out_len().is_some(), "conv1d input too short: {geom:?}");
        let bias = b.map(|b| self.value(b).data());
        let (out, cols, out_len) = conv1d_forward(tx.data(), tw.data(), bias, &geom);
        let t = Tensor::from_vec(out, &[geom.batch, geom.c_out, out_len]).expect("conv shape");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv1d { x, w, b, geom, cols, out_len }, rg)
    }

    /// Max pooling over the last axis.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let len = *tx.shape().last().unwrap();
        let rows = tx.numel() / len;
        assert!(
            crate::kernels::pool::pool_out_len(len, kernel, stride, pad).is_some(),
            "invalid pooling geometry len={len} k={kernel} s={stride} p={pad}"
        );
        let (out, arg, out_len) = max_pool_forward(tx.data(), rows, len, kernel, stride, pad);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let t = Tensor::from_vec(out, &shape).expect("pool shape");
        let rg = self.rg(x);
        self.push(t, Op::MaxPool { x, arg, rows, len, out_len }, rg)
    }

    /// Batch normalization over `[B, C]` or `[B, C, L]`. In training mode the
    /// running statistics update is queued (see [`Graph::take_buffer_updates`]).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f32,
        eps: f32,
    ) -> Var {
        let tx = self.value(x);
        let (b, c, l) = match tx.shape() {
            [b, c] => (*b, *c, 1),
            [b, c, l] => (*b, *c, *l),
            s => panic!("batch_norm expects 2-D or 3-D input, got {s:?}"),
        };
        let store = self.store;
        let batch_stats = self.train;
        let mut updates = Vec::new();
        let (mean, var) = if batch_stats {
            let (m, v) = norm::channel_stats(tx.data(), b, c, l);
            let n = (b * l) as f32;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = store.value(running_mean);
            let rv = store.value(running_var);
            let new_m: Vec<f32> =
                rm.data().iter().zip(&m).map(|(r, x)| (1.0 - momentum) * r + momentum * x).collect();
            let new_v: Vec<f32> = rv
                .data()
                .iter()
                .zip(&v)
                .map(|(r, x)| (1.0 - momentum) * r + momentum * x * unbiased)
                .collect();
            updates.push((running_mean, Tensor::from_vec(new_m, &[c]).expect("c")));
            updates.push((running_var, Tensor::from_vec(new_v, &[c]).expect("c")));
            (m, v)
        } else {
            (store.value(running_mean).data().to_vec(), store.value(running_var).data().to_vec())
        };
        let (y, cache) = norm::batch_norm_forward(
            tx.data(),
            b,
            c,
            l,
            &mean,
            &var,
            store.value(gamma).data(),
            store.value(beta).data(),
            eps,
        );
        let t = Tensor::from_vec(y, tx.shape()).expect("bn shape");
        self.buffer_updates.extend(updates);
        let (gv, bv) = (self.param(gamma), self.param(beta));
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        self.push(t, Op::BatchNorm { x, gamma: gv, beta: bv, cache, dims: [b, c, l], batch_stats }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let (y, cache) = norm::layer_norm_forward(
            tx.data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::from_vec(y, tx.shape()).expect("ln shape");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, cache }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_vec(data, tx.shape()).expect("dropout shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(perm.len(), tx.dims(), "permutation rank mismatch");
        let (data, shape) = permute_data(tx.data(), tx.shape(), perm);
        let t = Tensor::from_vec(data, &shape).expect("permute shape");
        let rg = self.rg(x);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape numel");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let first = self.shape(xs[0]);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::from_vec(data, &shape).expect("concat shape");
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(t, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::from_vec(data, &shape).expect("narrow shape");
        let rg = self.rg(x);
        self.push(t, Op::Narrow { x, axis, start }, rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Var {
        let tx = self.value(x);
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &tx.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in data.iter_mut() {
            *d /= n as f32;
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_vec(data, &shape).expect("mean shape");
        let rg = self.rg(x);
        self.push(t, Op::Mean { x, axis }, rg)
    }

    /// Softmax over the last axis. With `causal`, the last two axes must be
    /// square and entries above the diagonal receive zero probability.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap();
        if causal {
            assert_eq!(tx.dim(tx.dims() - 2), n, "causal softmax needs square scores");
        }
        let mut out = tx.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let limit = if causal { r % n + 1 } else { n };
            let m = row[..limit].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for v in row[..limit].iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row[..limit].iter_mut() {
                *v /= s;
            }
            for v in row[limit..].iter_mut() {
                *v = 0.0;
            }
        }
        let t = Tensor::from_vec(out, tx.shape()).expect("softmax shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Divides each row of `[n, d]` by its L2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms.push(nrm);
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        let t = Tensor::from_vec(out, tx.shape()).expect("l2 shape");
        let rg = self.rg(x);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    /// One LSTM layer over `x[B, T, I]`, returning `[B, T, H]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.dims(), 3, "lstm expects [B, T, I]");
        let hidden = self.value(w_hh).dim(1);
        let geom = LstmGeom { batch: tx.dim(0), steps: tx.dim(1), input: tx.dim(2), hidden, reverse };
        assert_eq!(self.value(w_ih).shape(), &[4 * hidden, geom.input], "lstm w_ih shape");
        let bias: Vec<f32> = self
            .value(b_ih)
            .data()
            .iter()
            .zip(self.value(b_hh).data())
            .map(|(a, b)| a + b)
            .collect();
        let (out, cache) =
            lstm_forward(tx.data(), self.value(w_ih).data(), self.value(w_hh).data(), &bias, &geom);
        let t = Tensor::from_vec(out, &[geom.batch, geom.steps, hidden]).expect("lstm shape");
        let rg = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.rg(v));
        self.push(t, Op::Lstm { x, w_ih, w_hh, b_ih, b_hh, geom, cache }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), rg)
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let t = op.forward(&vals);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(t, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { nodes: grads, params: self.params.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = Tensor::from_vec(data, self.value(v).shape()).expect("grad shape");
        self.accumulate(grads, v, t);
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        let gyd = gy.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gyd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = gyd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.acc_vec(grads, *a, ga);
                self.acc_vec(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.map(|v| v * s)),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                let n = self.value(*b).numel();
                let mut gb = vec![0.0f32; n];
                for row in gyd.chunks(n) {
                    for (d, v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.acc_vec(grads, *b, gb);
            }
            Op::ScaleChannels(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let l = tx.dim(2);
                let mut gx = vec![0.0f32; tx.numel()];
                let mut gs = vec![0.0f32; ts.numel()];
                for (r, &sv) in ts.data().iter().enumerate() {
                    for j in r * l..(r + 1) * l {
                        gx[j] = gyd[j] * sv;
                        gs[r] += gyd[j] * tx.data()[j];
                    }
                }
                self.acc_vec(grads, *x, gx);
                self.acc_vec(grads, *s, gs);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (tw.dim(0), tw.dim(1));
                let rows = tx.numel() / in_dim;
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; rows * in_dim];
                    gemm(1.0, MatRef::new(gyd, rows, out_dim), MatRef::new(tw.data(), out_dim, in_dim), 0.0, &mut gx);
                    self.acc_vec(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0f32; out_dim * in_dim];
                    gemm(1.0, MatRef::t(gyd, out_dim, rows), MatRef::new(tx.data(), rows, in_dim), 0.0, &mut gw);
                    self.acc_vec(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0f32; out_dim];
                    for row in gyd.chunks(out_dim) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc_vec(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
                let n = gy.dim(2);
                let mut ga = vec![0.0f32; ta.numel()];
                let mut gb = vec![0.0f32; tb.numel()];
                for s in 0..bs {
                    let g = &gyd[s * m * n..(s + 1) * m * n];
                    let ad = &ta.data()[s * m * k..(s + 1) * m * k];
                    let bd = &tb.data()[s * k * n..(s + 1) * k * n];
                    // dA = dY @ B^T where B is the logical [k, n] operand
                    let b_t = if *trans_b { MatRef::new(bd, n, k) } else { MatRef::t(bd, n, k) };
                    gemm(1.0, MatRef::new(g, m, n), b_t, 0.0, &mut ga[s * m * k..(s + 1) * m * k]);
                    if *trans_b {
                        // stored B is [n, k]: dB = dY^T @ A
                        gemm(1.0, MatRef::t(g, n, m), MatRef::new(ad, m, k), 0.0, &mut gb[s * k * n..(s + 1) * k * n]);
                    } else {
                        gemm(1.0, MatRef::t(ad, k, m), MatRef::new(g, m, n), 0.0, &mut gb[s * k * n..(s + 1) * k * n]);
                    }
                }
                self.acc_vec(grads, *a, ga);
                self.acc_vec(grads, *b, gb);
            }
            Op::Conv1d { x, w, b, geom, cols, out_len } => {
                let tw = self.value(*w);
                let (dx, dw, db) = conv1d_backward(gyd, tw.data(), cols, geom, *out_len, self.rg(*x));
                if let Some(dx) = dx {
                    self.acc_vec(grads, *x, dx);
                }
                self.acc_vec(grads, *w, dw);
                if let Some(b) = b {
                    self.acc_vec(grads, *b, db);
                }
            }
            Op::MaxPool { x, arg, rows, len, out_len } => {
                let dx = max_pool_backward(gyd, arg, *rows, *len, *out_len);
                self.acc_vec(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, cache, dims, batch_stats } => {
                let [b, c, l] = *dims;
                let (dx, dg, db) =
                    norm::batch_norm_backward(gyd, cache, self.value(*gamma).data(), b, c, l, *batch_stats);
                self.acc_vec(grads, *x, dx);
                self.acc_vec(grads, *gamma, dg);
                self.acc_vec(grads, *beta, db);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let d = self.value(*gamma).numel();
                let (dx, dg, db) = norm::layer_norm_backward(gyd, cache, self.value(*gamma).data(), d);
                self.acc_vec(grads, *x, dx);
                self.acc_vec(grads, *gamma, dg);
                self.acc_vec(grads, *beta, db);
            }
            Op::Relu(x) => {
                let o = out.expect("value");
                let g = gyd.iter().zip(o.data()).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                self.acc_vec(grads, *x, g);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let g = gyd.iter().zip(tx.data()).map(|(g, v)| g * gelu_grad(*v)).collect();
                self.acc_vec(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let o = out.expect("value");
                let g = gyd.iter().zip(o.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_vec(grads, *x, g);
            }
            Op::Tanh(x) => {
                let o = out.expect("value");
                let g = gyd.iter().zip(o.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc_vec(grads, *x, g);
            }
            Op::Dropout { x, mask } => {
                let g = gyd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc_vec(grads, *x, g);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (g, _) = permute_data(gyd, gy.shape(), &inv);
                self.acc_vec(grads, *x, g);
            }
            Op::Reshape(x) => self.acc_vec(grads, *x, gyd.to_vec()),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(gy.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).dim(*axis);
                    let mut g = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&gyd[base..base + n * inner]);
                    }
                    offset += n;
                    self.acc_vec(grads, v, g);
                }
            }
            Op::Narrow { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let len = gy.dim(*axis);
                let mut g = vec![0.0f32; tx.numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    g[base..base + len * inner].copy_from_slice(&gyd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc_vec(grads, *x, g);
            }
            Op::Mean { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let mut g = vec![0.0f32; tx.numel()];
                let inv = 1.0 / n as f32;
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            g[(o * n + i) * inner + j] = gyd[o * inner + j] * inv;
                        }
                    }
                }
                self.acc_vec(grads, *x, g);
            }
            Op::Softmax(x) => {
                let y = out.expect("value");
                let n = *y.shape().last().unwrap();
                let mut g = vec![0.0f32; y.numel()];
                for ((grow, yrow), dyrow) in g.chunks_mut(n).zip(y.data().chunks(n)).zip(gyd.chunks(n)) {
                    let dot: f32 = yrow.iter().zip(dyrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        grow[j] = yrow[j] * (dyrow[j] - dot);
                    }
                }
                self.acc_vec(grads, *x, g);
            }
            Op::L2Normalize { x, norms } => {
                let y = out.expect("value");
                let d = *y.shape().last().unwrap();
                let mut g = vec![0.0f32; y.numel()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gyd[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                self.acc_vec(grads, *x, g);
            }
            Op::Lstm { x, w_ih, w_hh, b_ih, b_hh, geom, cache } => {
                let o = out.expect("value");
                let lg = lstm_backward(
                    gyd,
                    self.value(*x).data(),
                    o.data(),
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                    cache,
                    geom,
                );
                self.acc_vec(grads, *x, lg.dx);
                self.acc_vec(grads, *w_ih, lg.dw_ih);
                self.acc_vec(grads, *w_hh, lg.dw_hh);
                self.acc_vec(grads, *b_ih, lg.dbias.clone());
                self.acc_vec(grads, *b_hh, lg.dbias);
            }
            Op::SumAll(x) => {
                let g = gy.item();
                let t = Tensor::full(self.value(*x).shape(), g);
                self.accumulate(grads, *x, t);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out.expect("value"), gy);
                for (&v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        self.accumulate(grads, v, g);
                    }
                }
            }
        }
    }
}

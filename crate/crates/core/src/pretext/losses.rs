//! Softmax-family losses evaluated in `f64` with row-max stabilization.
//!
//! Each loss has a plain function over tensors (for direct use and tests)
//! and a [`CustomOp`] adapter so it can terminate an autograd graph.

use sleepssl_nn::{CustomOp, Tensor};

use crate::error::{Result, SslError};

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().expect("non-scalar");
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_tensor(rows: Vec<Vec<f64>>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(rows.into_iter().flatten().map(|v| v as f32).collect(), shape).expect("grad shape")
}

/// Log-sum-exp over `vals` restricted to `mask`, plus the softmax weights.
fn masked_softmax(vals: &[f64], keep: impl Fn(usize) -> bool) -> (f64, Vec<f64>) {
    let m = vals
        .iter()
        .enumerate()
        .filter(|(a, _)| keep(*a))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = vals
        .iter()
        .enumerate()
        .map(|(a, &v)| if keep(a) { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    (m + s.ln(), p)
}

/// NT-Xent over the `2N` views `[za; zb]` with the paired view as positive
/// and every other view in the denominator. Returns the loss and gradients
/// with respect to `za` and `zb`.
pub(crate) fn nt_xent_with_grad(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let n = za.len();
    let z: Vec<&Vec<f64>> = za.iter().chain(zb.iter()).collect();
    let two_n = 2 * n;
    let mut grad = vec![vec![0.0; z[0].len()]; two_n];
    let mut loss = 0.0;
    for i in 0..two_n {
        let pos = (i + n) % two_n;
        let s: Vec<f64> = (0..two_n).map(|a| dot(z[i], z[a]) / tau).collect();
        let (lse, p) = masked_softmax(&s, |a| a != i);
        loss += lse - s[pos];
        for a in (0..two_n).filter(|&a| a != i) {
            let ds = (p[a] - f64::from(u8::from(a == pos))) / (two_n as f64 * tau);
            for k in 0..z[i].len() {
                grad[i][k] += ds * z[a][k];
                grad[a][k] += ds * z[i][k];
            }
        }
    }
    (loss / two_n as f64, grad)
}

fn check_pair(za: &Tensor, zb: &Tensor) -> Result<()> {
    if za.dims() != 2 || za.shape() != zb.shape() || za.dim(0) == 0 {
        return Err(SslError::Shape(format!("projection shapes {:?} and {:?}", za.shape(), zb.shape())));
    }
    Ok(())
}

/// Contrastive loss of two unit-norm projection batches at temperature `tau`.
pub fn nt_xent(za: &Tensor, zb: &Tensor, tau: f64) -> Result<f64> {
    check_pair(za, zb)?;
    if !(tau > 0.0) {
        return Err(SslError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (a, b) = (rows(za), rows(zb));
    for r in a.iter().chain(&b) {
        let norm = dot(r, r).sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(SslError::InvalidArgument(format!("projection row has norm {norm}, expected 1")));
        }
    }
    Ok(nt_xent_with_grad(&a, &b, tau).0)
}

pub struct NtXentOp {
    pub tau: f64,
    grads: Option<Vec<Vec<f64>>>,
}

impl NtXentOp {
    pub fn new(tau: f64) -> Self {
        Self { tau, grads: None }
    }
}

impl CustomOp for NtXentOp {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (loss, g) = nt_xent_with_grad(&rows(inputs[0]), &rows(inputs[1]), self.tau);
        self.grads = Some(g);
        Tensor::scalar(loss as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let scale = grad.item() as f64;
        let g = self.grads.as_ref().expect("forward ran");
        let n = inputs[0].dim(0);
        let scaled: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let (a, b) = scaled.split_at(n);
        vec![Some(to_tensor(a.to_vec(), inputs[0].shape())), Some(to_tensor(b.to_vec(), inputs[1].shape()))]
    }
}

/// InfoNCE where row `i` of `pred` must pick row `i` of `target` among all
/// target rows (raw dot-product scores).
pub(crate) fn info_nce_with_grad(pred: &[Vec<f64>], target: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = pred.len();
    let d = pred[0].len();
    let mut gp = vec![vec![0.0; d]; n];
    let mut gt = vec![vec![0.0; d]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let s: Vec<f64> = target.iter().map(|t| dot(&pred[i], t)).collect();
        let (lse, p) = masked_softmax(&s, |_| true);
        loss += lse - s[i];
        for j in 0..n {
            let ds = (p[j] - f64::from(u8::from(i == j))) / n as f64;
            for k in 0..d {
                gp[i][k] += ds * target[j][k];
                gt[j][k] += ds * pred[i][k];
            }
        }
    }
    (loss / n as f64, gp, gt)
}

pub fn info_nce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(info_nce_with_grad(&rows(pred), &rows(target)).0)
}

#[derive(Default)]
pub struct InfoNceOp {
    grads: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl CustomOp for InfoNceOp {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (loss, gp, gt) = info_nce_with_grad(&rows(inputs[0]), &rows(inputs[1]));
        self.grads = Some((gp, gt));
        Tensor::scalar(loss as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.item() as f64;
        let (gp, gt) = self.grads.as_ref().expect("forward ran");
        let scale = |g: &Vec<Vec<f64>>| g.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        vec![Some(to_tensor(scale(gp), inputs[0].shape())), Some(to_tensor(scale(gt), inputs[1].shape()))]
    }
}

/// Mean (optionally class-weighted) negative log-likelihood of `targets`.
pub(crate) fn cross_entropy_with_grad(logits: &[Vec<f64>], targets: &[usize], weights: Option<&[f64]>) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(targets) {
        let w = weights.map_or(1.0, |w| w[y]);
        let (lse, p) = masked_softmax(row, |_| true);
        loss += w * (lse - row[y]);
        grad.push(
            p.iter()
                .enumerate()
                .map(|(c, &pc)| w * (pc - f64::from(u8::from(c == y))) / n)
                .collect(),
        );
    }
    (loss / n, grad)
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    if logits.dims() != 2 || logits.dim(0) != targets.len() || targets.is_empty() {
        return Err(SslError::Shape(format!("logits {:?} for {} targets", logits.shape(), targets.len())));
    }
    let c = logits.dim(1);
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(SslError::InvalidArgument(format!("target {t} outside {c} classes")));
    }
    if weights.is_some_and(|w| w.len() != c) {
        return Err(SslError::InvalidArgument("one weight per class required".into()));
    }
    Ok(cross_entropy_with_grad(&rows(logits), targets, weights).0)
}

pub struct CrossEntropyOp {
    targets: Vec<usize>,
    weights: Option<Vec<f64>>,
    grad: Option<Vec<Vec<f64>>>,
}

impl CrossEntropyOp {
    pub fn new(targets: Vec<usize>, weights: Option<Vec<f64>>) -> Self {
        Self { targets, weights, grad: None }
    }
}

impl CustomOp for CrossEntropyOp {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (loss, g) = cross_entropy_with_grad(&rows(inputs[0]), &self.targets, self.weights.as_deref());
        self.grad = Some(g);
        Tensor::scalar(loss as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.item() as f64;
        let g = self.grad.as_ref().expect("forward ran");
        let scaled = g.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        vec![Some(to_tensor(scaled, inputs[0].shape()))]
    }
}

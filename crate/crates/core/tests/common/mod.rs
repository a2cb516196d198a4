//! Independent brute-force oracles and fixtures shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepssl_nn::{CustomOp, Graph, ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    random_rows(rng, n, d, 1.0)
        .into_iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    let d = rows[0].len();
    Tensor::from_vec(rows.iter().flatten().map(|&v| v as f32).collect(), &[rows.len(), d]).unwrap()
}

/// Rows of `t` widened to f64, so oracles see exactly what the code sees.
pub fn rows_of(t: &Tensor) -> Rows {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized temperature-scaled cross entropy, written as the literal
/// double sum: for every view, minus the log of its positive's share of
/// exp-similarity among all other views, averaged over the 2N views.
/// Similarity is the cosine when `cosine_sim`, else the raw dot product.
pub fn nt_xent_oracle(za: &Rows, zb: &Rows, tau: f64, cosine_sim: bool) -> f64 {
    let n = za.len();
    let z: Vec<&Vec<f64>> = za.iter().chain(zb).collect();
    let sim = |a: usize, b: usize| if cosine_sim { cosine(z[a], z[b]) } else { dot(z[a], z[b]) };
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..2 * n {
            if k != i {
                denom += (sim(i, k) / tau).exp();
            }
        }
        total += -((sim(i, pos) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

/// Row i of `pred` must pick row i of `target` among all target rows.
pub fn info_nce_oracle(pred: &Rows, target: &Rows) -> f64 {
    let n = pred.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| dot(&pred[i], &target[j]).exp()).sum();
        total += -(dot(&pred[i], &target[i]).exp() / denom).ln();
    }
    total / n as f64
}

pub fn cross_entropy_oracle(logits: &Rows, targets: &[usize], weights: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(targets) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += weights.map_or(1.0, |w| w[y]) * -(row[y].exp() / denom).ln();
    }
    total / logits.len() as f64
}

/// Central differences of `f` with respect to every entry of `inputs[which]`.
pub fn finite_diff(f: impl Fn(&[Rows]) -> f64, inputs: &[Rows], which: usize, h: f64) -> Rows {
    let mut out = inputs[which].clone();
    for i in 0..out.len() {
        for k in 0..out[i].len() {
            let mut plus = inputs.to_vec();
            plus[which][i][k] += h;
            let mut minus = inputs.to_vec();
            minus[which][i][k] -= h;
            out[i][k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    out
}

/// `||a - b|| / max(||a||, ||b||, floor)` over all entries.
pub fn rel_err(a: &Rows, b: &Rows, floor: f64) -> f64 {
    let diff: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Runs `op` as the root of a graph and returns the loss and the gradient
/// with respect to each input.
pub fn op_value_and_grads(op: Box<dyn CustomOp>, inputs: &[Tensor]) -> (f64, Vec<Rows>) {
    let store = ParamStore::new();
    let mut g = Graph::train(&store, 0);
    let vars: Vec<_> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = g.custom(op, &vars);
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss);
    (value, vars.iter().map(|&v| rows_of(grads.wrt(v).expect("input gradient"))).collect())
}

/// `[true][pred]` counts, accuracy and macro F1 over classes that occur
/// in either vector, computed from first principles.
pub fn confusion_oracle(pred: &[usize], truth: &[usize], k: usize) -> (Vec<Vec<usize>>, f64, f64, Vec<f64>) {
    let mut cm = vec![vec![0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let acc = (0..k).map(|c| cm[c][c]).sum::<usize>() as f64 / pred.len() as f64;
    let mut f1 = vec![0.0; k];
    let mut present = Vec::new();
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let support: usize = cm[c].iter().sum();
        let predicted: usize = (0..k).map(|t| cm[t][c]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        f1[c] = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if support > 0 {
            present.push(f1[c]);
        }
    }
    let mf1 = present.iter().sum::<f64>() / present.len() as f64;
    (cm, acc, mf1, f1)
}

//! Batch and layer normalization.

pub struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Batch statistics for `[batch, channels, len]` data: per-channel
/// `(mean, biased variance)`.
pub fn channel_stats(x: &[f32], batch: usize, channels: usize, len: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for b in 0..batch {
            s += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0f64;
        for b in 0..batch {
            ss += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (ss / n) as f32;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    x: &[f32],
    batch: usize,
    channels: usize,
    len: usize,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, NormCache) {
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = h * gamma[c] + beta[c];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the training-mode
/// gradient (statistics depend on `x`) over the frozen-statistics one.
pub fn batch_norm_backward(
    dy: &[f32],
    cache: &NormCache,
    gamma: &[f32],
    batch: usize,
    channels: usize,
    len: usize,
    batch_stats: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = (batch * len) as f32;
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                dgamma[c] += dy[i] * cache.xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0f32; dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let k = gamma[c] * cache.inv_std[c];
            for i in off..off + len {
                dx[i] = if batch_stats {
                    k * (dy[i] - dbeta[c] / n - cache.xhat[i] * dgamma[c] / n)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn layer_norm_forward(
    x: &[f32],
    dim: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, NormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let m = row.iter().sum::<f32>() / dim as f32;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<f32>() / dim as f32;
        let is = 1.0 / (v + eps).sqrt();
        inv_std[r] = is;
        for j in 0..dim {
            let h = (row[j] - m) * is;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * gamma[j] + beta[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: &[f32],
    cache: &NormCache,
    gamma: &[f32],
    dim: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; dim];
    let mut dbeta = vec![0.0f32; dim];
    for r in 0..rows {
        let mut sum_d = 0.0f32;
        let mut sum_dx = 0.0f32;
        for j in 0..dim {
            let i = r * dim + j;
            let d = dy[i] * gamma[j];
            dgamma[j] += dy[i] * cache.xhat[i];
            dbeta[j] += dy[i];
            sum_d += d;
            sum_dx += d * cache.xhat[i];
        }
        let n = dim as f32;
        for j in 0..dim {
            let i = r * dim + j;
            let d = dy[i] * gamma[j];
            dx[i] = cache.inv_std[r] * (d - sum_d / n - cache.xhat[i] * sum_dx / n);
        }
    }
    (dx, dgamma, dbeta)
}

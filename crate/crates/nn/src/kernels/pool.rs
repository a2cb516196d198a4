//! Max pooling over the last axis of `[rows, len]` data.

/// Output length for a pooling window; `None` if the geometry is invalid.
pub fn pool_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || pad * 2 > kernel || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

/// Returns pooled values and the source index of each maximum.
pub fn max_pool_forward(
    x: &[f32],
    rows: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<u32>, usize) {
    let out_len = pool_out_len(len, kernel, stride, pad).expect("validated pool geometry");
    let mut out = vec![0.0f32; rows * out_len];
    let mut arg = vec![0u32; rows * out_len];
    for r in 0..rows {
        let src = &x[r * len..(r + 1) * len];
        for o in 0..out_len {
            let start = (o * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(len);
            let mut best = lo;
            for i in lo + 1..hi {
                if src[i] > src[best] {
                    best = i;
                }
            }
            out[r * out_len + o] = src[best];
            arg[r * out_len + o] = best as u32;
        }
    }
    (out, arg, out_len)
}

pub fn max_pool_backward(dy: &[f32], arg: &[u32], rows: usize, len: usize, out_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * len];
    for r in 0..rows {
        for o in 0..out_len {
            dx[r * len + arg[r * out_len + o] as usize] += dy[r * out_len + o];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_pool_matches_torch_semantics() {
        // torch.nn.MaxPool1d(3, stride=2, padding=1) on [1,5,2,4,3]
        let (out, arg, ol) = max_pool_forward(&[1.0, 5.0, 2.0, 4.0, 3.0], 1, 5, 3, 2, 1);
        assert_eq!(ol, 3);
        assert_eq!(out, vec![5.0, 5.0, 4.0]);
        assert_eq!(arg, vec![1, 1, 3]);
        let dx = max_pool_backward(&[1.0, 1.0, 1.0], &arg, 1, 5, ol);
        assert_eq!(dx, vec![0.0, 2.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_oversized_padding() {
        assert!(pool_out_len(10, 2, 2, 2).is_none());
    }
}

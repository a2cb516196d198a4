//! 1-D convolution via im2col + GEMM.

use crate::gemm::{gemm, MatRef};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> Option<usize> {
        let padded = self.len + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Builds the `[c_in * kernel, batch * out_len]` column matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, out_len: usize) -> Vec<f32> {
    let ncol = g.batch * out_len;
    let mut cols = vec![0.0f32; g.c_in * g.kernel * ncol];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * ncol..(ci * g.kernel + k + 1) * ncol];
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.len..(b * g.c_in + ci + 1) * g.len];
                let dst = &mut row[b * out_len..(b + 1) * out_len];
                for (lo, d) in dst.iter_mut().enumerate() {
                    let pos = (lo * g.stride + k) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], g: &ConvGeom, out_len: usize, dx: &mut [f32]) {
    let ncol = g.batch * out_len;
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &dcols[(ci * g.kernel + k) * ncol..(ci * g.kernel + k + 1) * ncol];
            for b in 0..g.batch {
                let dst = &mut dx[(b * g.c_in + ci) * g.len..(b * g.c_in + ci + 1) * g.len];
                let src = &row[b * out_len..(b + 1) * out_len];
                for (lo, &v) in src.iter().enumerate() {
                    let pos = (lo * g.stride + k) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }
}

/// Returns `(output [batch, c_out, out_len], cols)`.
pub fn conv1d_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> (Vec<f32>, Vec<f32>, usize) {
    let out_len = g.out_len().expect("validated conv geometry");
    let cols = im2col(x, g, out_len);
    let ncol = g.batch * out_len;
    let ck = g.c_in * g.kernel;
    let mut tmp = vec![0.0f32; g.c_out * ncol];
    gemm(1.0, MatRef::new(w, g.c_out, ck), MatRef::new(&cols, ck, ncol), 0.0, &mut tmp);
    let mut out = vec![0.0f32; g.batch * g.c_out * out_len];
    for co in 0..g.c_out {
        let bv = bias.map_or(0.0, |b| b[co]);
        for b in 0..g.batch {
            let src = &tmp[co * ncol + b * out_len..co * ncol + (b + 1) * out_len];
            let dst = &mut out[(b * g.c_out + co) * out_len..(b * g.c_out + co + 1) * out_len];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    (out, cols, out_len)
}

/// Gradients `(dx, dw, dbias)` given the upstream gradient `dy`.
pub fn conv1d_backward(
    dy: &[f32],
    w: &[f32],
    cols: &[f32],
    g: &ConvGeom,
    out_len: usize,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let ncol = g.batch * out_len;
    let ck = g.c_in * g.kernel;
    let mut dyt = vec![0.0f32; g.c_out * ncol];
    let mut db = vec![0.0f32; g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &dy[(b * g.c_out + co) * out_len..(b * g.c_out + co + 1) * out_len];
            let dst = &mut dyt[co * ncol + b * out_len..co * ncol + (b + 1) * out_len];
            dst.copy_from_slice(src);
            db[co] += src.iter().sum::<f32>();
        }
    }
    let mut dw = vec![0.0f32; g.c_out * ck];
    gemm(1.0, MatRef::new(&dyt, g.c_out, ncol), MatRef::t(cols, ncol, ck), 0.0, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; ck * ncol];
        gemm(1.0, MatRef::t(w, ck, g.c_out), MatRef::new(&dyt, g.c_out, ncol), 0.0, &mut dcols);
        let mut dx = vec![0.0f32; g.batch * g.c_in * g.len];
        col2im(&dcols, g, out_len, &mut dx);
        dx
    });
    (dx, dw, db)
}

//! Single-layer, single-direction LSTM with full backpropagation through
//! time. Gate order is `i, f, g, o` (PyTorch layout).

use crate::gemm::{gemm, MatRef};

#[derive(Debug, Clone, Copy)]
pub struct LstmGeom {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmGeom {
    #[inline]
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }
}

pub struct LstmCache {
    /// Post-activation gates per processing step, `[steps, batch, 4H]`.
    acts: Vec<f32>,
    /// Cell state after each processing step, `[steps, batch, H]`.
    cells: Vec<f32>,
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// `x` is `[batch, steps, input]`; returns hidden states `[batch, steps, H]`.
pub fn lstm_forward(
    x: &[f32],
    w_ih: &[f32],
    w_hh: &[f32],
    bias: &[f32],
    g: &LstmGeom,
) -> (Vec<f32>, LstmCache) {
    let (b, t, h) = (g.batch, g.steps, g.hidden);
    let h4 = 4 * h;
    let mut xw = vec![0.0f32; b * t * h4];
    gemm(1.0, MatRef::new(x, b * t, g.input), MatRef::t(w_ih, g.input, h4), 0.0, &mut xw);
    let mut out = vec![0.0f32; b * t * h];
    let mut acts = vec![0.0f32; t * b * h4];
    let mut cells = vec![0.0f32; t * b * h];
    let mut h_prev = vec![0.0f32; b * h];
    let mut rec = vec![0.0f32; b * h4];
    for s in 0..t {
        let tt = g.time(s);
        if s > 0 {
            gemm(1.0, MatRef::new(&h_prev, b, h), MatRef::t(w_hh, h, h4), 0.0, &mut rec);
        }
        for bi in 0..b {
            let xrow = &xw[(bi * t + tt) * h4..(bi * t + tt + 1) * h4];
            let arow = &mut acts[(s * b + bi) * h4..(s * b + bi + 1) * h4];
            for j in 0..h4 {
                let pre = xrow[j] + bias[j] + if s > 0 { rec[bi * h4 + j] } else { 0.0 };
                arow[j] = if (2 * h..3 * h).contains(&j) { pre.tanh() } else { sigmoid(pre) };
            }
            for j in 0..h {
                let (i, f, gg, o) = (arow[j], arow[h + j], arow[2 * h + j], arow[3 * h + j]);
                let c_prev = if s > 0 { cells[((s - 1) * b + bi) * h + j] } else { 0.0 };
                let c = f * c_prev + i * gg;
                cells[(s * b + bi) * h + j] = c;
                let hv = o * c.tanh();
                out[(bi * t + tt) * h + j] = hv;
                h_prev[bi * h + j] = hv;
            }
        }
    }
    (out, LstmCache { acts, cells })
}

pub struct LstmGrads {
    pub dx: Vec<f32>,
    pub dw_ih: Vec<f32>,
    pub dw_hh: Vec<f32>,
    pub dbias: Vec<f32>,
}

pub fn lstm_backward(
    dy: &[f32],
    x: &[f32],
    out: &[f32],
    w_ih: &[f32],
    w_hh: &[f32],
    cache: &LstmCache,
    g: &LstmGeom,
) -> LstmGrads {
    let (b, t, h) = (g.batch, g.steps, g.hidden);
    let h4 = 4 * h;
    // dgates and previous hidden states laid out as rows `bi * t + tt`
    let mut dgates = vec![0.0f32; b * t * h4];
    let mut h_prev_all = vec![0.0f32; b * t * h];
    let mut dh_next = vec![0.0f32; b * h];
    let mut dc_next = vec![0.0f32; b * h];
    let mut dgs = vec![0.0f32; b * h4];
    for s in (0..t).rev() {
        let tt = g.time(s);
        for bi in 0..b {
            let arow = &cache.acts[(s * b + bi) * h4..(s * b + bi + 1) * h4];
            for j in 0..h {
                let (i, f, gg, o) = (arow[j], arow[h + j], arow[2 * h + j], arow[3 * h + j]);
                let c = cache.cells[(s * b + bi) * h + j];
                let c_prev = if s > 0 { cache.cells[((s - 1) * b + bi) * h + j] } else { 0.0 };
                let tc = c.tanh();
                let dh = dy[(bi * t + tt) * h + j] + dh_next[bi * h + j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[bi * h + j];
                dc_next[bi * h + j] = dc * f;
                let row = &mut dgs[bi * h4..(bi + 1) * h4];
                row[j] = dc * gg * i * (1.0 - i);
                row[h + j] = dc * c_prev * f * (1.0 - f);
                row[2 * h + j] = dc * i * (1.0 - gg * gg);
                row[3 * h + j] = d_o * o * (1.0 - o);
            }
            dgates[(bi * t + tt) * h4..(bi * t + tt + 1) * h4]
                .copy_from_slice(&dgs[bi * h4..(bi + 1) * h4]);
            if s > 0 {
                let tp = g.time(s - 1);
                h_prev_all[(bi * t + tt) * h..(bi * t + tt + 1) * h]
                    .copy_from_slice(&out[(bi * t + tp) * h..(bi * t + tp + 1) * h]);
            }
        }
        if s > 0 {
            gemm(1.0, MatRef::new(&dgs, b, h4), MatRef::new(w_hh, h4, h), 0.0, &mut dh_next);
        }
    }
    let bt = b * t;
    let mut dw_hh = vec![0.0f32; h4 * h];
    gemm(1.0, MatRef::t(&dgates, h4, bt), MatRef::new(&h_prev_all, bt, h), 0.0, &mut dw_hh);
    let mut dw_ih = vec![0.0f32; h4 * g.input];
    gemm(1.0, MatRef::t(&dgates, h4, bt), MatRef::new(x, bt, g.input), 0.0, &mut dw_ih);
    let mut dx = vec![0.0f32; bt * g.input];
    gemm(1.0, MatRef::new(&dgates, bt, h4), MatRef::new(w_ih, h4, g.input), 0.0, &mut dx);
    let mut dbias = vec![0.0f32; h4];
    for row in dgates.chunks(h4) {
        for (d, v) in dbias.iter_mut().zip(row) {
            *d += v;
        }
    }
    LstmGrads { dx, dw_ih, dw_hh, dbias }
}

//! Raw loops behind the convolution, attention and resampling ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{gemm_into, MatRef};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub(crate) fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds an image `[channels, height, width]` into a
/// `[channels * kh * kw, out_h * out_w]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    let drow = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters (accumulating) a patch matrix back onto
/// an image buffer.
pub(crate) fn col2im(cols_buf: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let base = ii as usize * g.width;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            plane[base + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub lq: usize,
    pub lk: usize,
    pub width: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }
}

/// Multi-head scaled dot-product attention. Returns the output `[lq, width]`
/// and the per-head probability matrices `[heads, lq, lk]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: &AttnDims) -> (Vec<f64>, Vec<f64>) {
    let dh = d.head_dim();
    let mut out = vec![0.0; d.lq * d.width];
    let mut probs = vec![0.0; d.heads * d.lq * d.lk];
    for h in 0..d.heads {
        let p = &mut probs[h * d.lq * d.lk..(h + 1) * d.lq * d.lk];
        let qh = MatRef::cols_of(q, d.lq, d.width, h * dh, dh);
        let kh = MatRef::cols_of(k, d.lk, d.width, h * dh, dh);
        let vh = MatRef::cols_of(v, d.lk, d.width, h * dh, dh);
        gemm_into(d.scale(), qh, kh.t(), 0.0, p, d.lk);
        for i in 0..d.lq {
            let row = &mut p[i * d.lk..(i + 1) * d.lk];
            let limit = if d.causal { (i + 1).min(d.lk) } else { d.lk };
            softmax_prefix(row, limit);
        }
        gemm_into(1.0, MatRef::new(p, d.lq, d.lk), vh, 0.0, &mut out[h * dh..], d.width);
    }
    (out, probs)
}

/// In-place softmax over `row[..limit]`; entries past `limit` are set to 0.
pub(crate) fn softmax_prefix(row: &mut [f64], limit: usize) {
    let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for r in &mut row[..limit] {
        *r = libm::exp(*r - max);
        sum += *r;
    }
    for r in &mut row[..limit] {
        *r /= sum;
    }
    for r in &mut row[limit..] {
        *r = 0.0;
    }
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: &AttnDims,
) -> AttnGrads {
    let dh = d.head_dim();
    let mut dq = vec![0.0; d.lq * d.width];
    let mut dk = vec![0.0; d.lk * d.width];
    let mut dv = vec![0.0; d.lk * d.width];
    let mut ds = vec![0.0; d.lq * d.lk];
    for h in 0..d.heads {
        let p = &probs[h * d.lq * d.lk..(h + 1) * d.lq * d.lk];
        let qh = MatRef::cols_of(q, d.lq, d.width, h * dh, dh);
        let kh = MatRef::cols_of(k, d.lk, d.width, h * dh, dh);
        let vh = MatRef::cols_of(v, d.lk, d.width, h * dh, dh);
        let doh = MatRef::cols_of(dout, d.lq, d.width, h * dh, dh);
        let pm = MatRef::new(p, d.lq, d.lk);
        // dV_h = P^T dO_h
        gemm_into(1.0, pm.t(), doh, 0.0, &mut dv[h * dh..], d.width);
        // dP = dO_h V_h^T, then the softmax Jacobian.
        gemm_into(1.0, doh, vh.t(), 0.0, &mut ds, d.lk);
        for i in 0..d.lq {
            let pr = &p[i * d.lk..(i + 1) * d.lk];
            let dr = &mut ds[i * d.lk..(i + 1) * d.lk];
            let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (dv_, pv) in dr.iter_mut().zip(pr) {
                *dv_ = pv * (*dv_ - inner);
            }
        }
        let dsm = MatRef::new(&ds, d.lq, d.lk);
        gemm_into(d.scale(), dsm, kh, 0.0, &mut dq[h * dh..], d.width);
        gemm_into(d.scale(), dsm.t(), qh, 0.0, &mut dk[h * dh..], d.width);
    }
    AttnGrads { dq, dk, dv }
}

/// Source taps for pixel-center-aligned linear resampling along one axis.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (libm::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear weights for a continuous grid position with border clamping.
/// Returns `[(row, col, weight); 4]`.
pub(crate) fn bilinear_corners(u: f64, v: f64, height: usize, width: usize) -> [(usize, usize, f64); 4] {
    let u = u.clamp(0.0, (width - 1) as f64);
    let v = v.clamp(0.0, (height - 1) as f64);
    let x0 = libm::floor(u) as usize;
    let y0 = libm::floor(v) as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = u - x0 as f64;
    let ay = v - y0 as f64;
    [
        (y0, x0, (1.0 - ay) * (1.0 - ax)),
        (y0, x1, (1.0 - ay) * ax),
        (y1, x0, ay * (1.0 - ax)),
        (y1, x1, ay * ax),
    ]
}

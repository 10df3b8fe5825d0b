//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] instead of copied. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node that
//! depends on a trainable leaf.

mod kernels;

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use kernels::{AttnDims, ConvGeom};

use crate::math::{gemm, MatRef, NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) use kernels::{bilinear_corners, linear_taps};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    QuickGelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    FrozenBatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool { x: Var, k: usize },
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    ResizeBilinear(Var),
    SamplePoints { x: Var, points: Vec<Option<[f64; 2]>> },
    MaskedMse { pred: Var, target: Tensor, mask: Vec<bool> },
    DiagContrastive { m: Var, mask: Vec<bool> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
}

/// Output of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that was reached.
    pub fn params(&self, graph: &Graph<'_>) -> Vec<(ParamId, Tensor)> {
        graph
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param,
            needs_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a scalar");
        let mut out = self.value(x).clone();
        out.scale(self.value(s).item());
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            assert_eq!(self.shape(v), &shape[..], "weighted_sum: shape mismatch");
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), ng)
    }

    fn mat_view(&self, v: Var, t: bool) -> MatRef<'_> {
        let value = self.value(v);
        assert_eq!(value.shape().len(), 2, "matmul operands must be 2-d");
        let m = MatRef::new(value.data(), value.dim(0), value.dim(1));
        if t {
            m.t()
        } else {
            m
        }
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.mat_view(a, ta), self.mat_view(b, tb));
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul: inner dimension mismatch {:?} x {:?}", sa, sb);
        let mut out = vec![0.0; m * n];
        gemm(1.0, av, bv, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`, the layout of a linear layer with `[out, in]` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, true)
    }

    /// `x[r, c] + b[c]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (rows, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(b).len(), cols, "add_row_bias: width mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for r in 0..rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddRowBias(x, b), ng)
    }

    /// `x[c, ..] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (rows, _) = self.value(x).rows_cols();
        assert_eq!(self.value(b).len(), rows, "add_channel_bias: channel mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (r, bv) in bias.iter().enumerate() {
            for o in out.row_mut(r) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddChannelBias(x, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= sigmoid(1.702 * *v);
        }
        let ng = self.needs(x);
        self.push(out, Op::QuickGelu(x), ng)
    }

    /// Row-wise layer normalization of a 2-d tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(gamma).len(), cols);
        assert_eq!(self.value(beta).len(), cols);
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, ng)
    }

    /// Batch normalization with fixed running statistics; only the affine
    /// terms are learnable.
    pub fn frozen_batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Var {
        let (channels, _) = self.value(x).rows_cols();
        assert_eq!(running_mean.len(), channels);
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for c in 0..channels {
            let (m, s, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
            for v in out.row_mut(c) {
                *v = (*v - m) * s * gc + bc;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::FrozenBatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        )
    }

    /// 2-d convolution of `x [c_in, h, w]` with `w [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [c_out, c_in, kh, kw]");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch {:?} vs {:?}", xs, ws);
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - ws[2]) / stride + 1,
            out_w: (xs[2] + 2 * pad - ws[3]) / stride + 1,
        };
        let k = geom.channels * geom.kh * geom.kw;
        let p = geom.out_h * geom.out_w;
        let mut out = vec![0.0; ws[0] * p];
        let wm = MatRef::new(self.value(w).data(), ws[0], k);
        if geom.is_pointwise() {
            gemm(1.0, wm, MatRef::new(self.value(x).data(), k, p), 0.0, &mut out);
        } else {
            let cols = kernels::im2col(self.value(x).data(), &geom);
            gemm(1.0, wm, MatRef::new(&cols, k, p), 0.0, &mut out);
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(
            Tensor::from_vec(&[ws[0], geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, geom },
            ng,
        )
    }

    /// Transposed convolution of `x [c_in, h, w]` with `w [c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[0], "conv_transpose2d: channel mismatch {:?} vs {:?}", xs, ws);
        let (cin, cout) = (ws[0], ws[1]);
        let out_h = (xs[1] - 1) * stride + ws[2] - 2 * pad;
        let out_w = (xs[2] - 1) * stride + ws[3] - 2 * pad;
        // Geometry of the equivalent forward convolution over the output.
        let geom = ConvGeom {
            channels: cout,
            height: out_h,
            width: out_w,
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h: xs[1],
            out_w: xs[2],
        };
        let hw = xs[1] * xs[2];
        let k = cout * ws[2] * ws[3];
        let mut cols = vec![0.0; k * hw];
        gemm(
            1.0,
            MatRef::new(self.value(w).data(), cin, k).t(),
            MatRef::new(self.value(x).data(), cin, hw),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; cout * out_h * out_w];
        kernels::col2im(&cols, &geom, &mut out);
        let ng = self.needs(x) || self.needs(w);
        self.push(
            Tensor::from_vec(&[cout, out_h, out_w], out),
            Op::ConvTranspose2d { x, w, geom },
            ng,
        )
    }

    /// Non-overlapping average pooling with window and stride `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        let row = ch * h * w + (i * k + di) * w + j * k;
                        s += src[row..row + k].iter().sum::<f64>();
                    }
                    out[ch * oh * ow + i * ow + j] = s * norm;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out), Op::AvgPool { x, k }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Concatenation along the leading axis; trailing sizes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat: trailing shape mismatch");
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        assert!(start + len <= rows, "slice_rows out of range");
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, data), Op::SliceRows { x, start }, ng)
    }

    /// Mean over rows of a 2-d tensor, giving `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[1, cols], out), Op::MeanRows(x), ng)
    }

    /// Scales each row to unit L2 norm. Rows with norm below `1e-12` become
    /// zero vectors.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let (rows, _) = out.rows_cols();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if n < NORM_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let ng = self.needs(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `[lq, d]`, keys and values `[lk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (lq, width) = self.value(q).rows_cols();
        let (lk, wk) = self.value(k).rows_cols();
        assert_eq!(width, wk, "attention: query/key width mismatch");
        assert_eq!(self.value(v).rows_cols(), (lk, width), "attention: value shape mismatch");
        assert!(heads >= 1 && width % heads == 0, "attention: width not divisible by heads");
        let dims = AttnDims {
            lq,
            lk,
            width,
            heads,
            causal,
        };
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &dims);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Tensor::from_vec(&[lq, width], out),
            Op::Attention { q, k, v, dims, probs },
            ng,
        )
    }

    /// Bilinear resize of `x [c, h, w]` with pixel-center alignment.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = resize_forward(self.value(x), out_h, out_w);
        let ng = self.needs(x);
        self.push(out, Op::ResizeBilinear(x), ng)
    }

    /// Bilinearly samples `x [c, h, w]` at continuous grid positions
    /// `(col, row)`, clamped to the border. `None` entries yield zero rows.
    /// Output is `[points, c]`.
    pub fn sample_points(&mut self, x: Var, points: &[Option<[f64; 2]>]) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; points.len() * c];
        for (n, p) in points.iter().enumerate() {
            let Some([u, v]) = *p else { continue };
            for (yi, xi, wt) in bilinear_corners(u, v, h, w) {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[n * c + ch] += wt * t.data()[ch * h * w + yi * w + xi];
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[points.len(), c], out),
            Op::SamplePoints {
                x,
                points: points.to_vec(),
            },
            ng,
        )
    }

    /// Mean squared error over the leading-axis slices whose mask is set.
    /// Zero when nothing is selected.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "masked_mse: shape mismatch");
        let (rows, cols) = p.rows_cols();
        assert_eq!(mask.len(), rows, "masked_mse: mask length mismatch");
        let count = mask.iter().filter(|m| **m).count() * cols;
        let mut sum = 0.0;
        for r in (0..rows).filter(|r| mask[*r]) {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                sum += (a - b) * (a - b);
            }
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Symmetric softmax cross-entropy of a square score matrix against the
    /// identity target, restricted to the rows and columns whose mask is set.
    pub fn diag_contrastive(&mut self, m: Var, mask: &[bool]) -> Var {
        let t = self.value(m);
        let n = t.dim(0);
        assert_eq!(t.shape(), &[n, n], "diag_contrastive: matrix must be square");
        assert_eq!(mask.len(), n);
        let loss = diag_contrastive_value(t, mask);
        let ng = self.needs(m);
        self.push(
            Tensor::scalar(loss),
            Op::DiagContrastive {
                m,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let shape = self.shape(root).to_vec();
        self.backward_with(root, Tensor::full(&shape, 1.0))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "backward: seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.accumulate(grads, v, gout.clone());
                    }
                }
            }
            Op::Scale(x, s) => {
                let mut g = gout.clone();
                g.scale(*s);
                self.accumulate(grads, *x, g);
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                if self.needs(*x) {
                    let mut g = gout.clone();
                    g.scale(sv);
                    self.accumulate(grads, *x, g);
                }
                if self.needs(*s) {
                    let d = crate::math::dot(gout.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![d]));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let mut g = gout.clone();
                        g.scale(w);
                        self.accumulate(grads, v, g);
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let dc = MatRef::new(gout.data(), gout.dim(0), gout.dim(1));
                if self.needs(*a) {
                    let bv = self.mat_view(*b, *tb);
                    let shape = self.shape(*a).to_vec();
                    let mut da = vec![0.0; shape[0] * shape[1]];
                    if *ta {
                        gemm(1.0, bv, dc.t(), 0.0, &mut da);
                    } else {
                        gemm(1.0, dc, bv.t(), 0.0, &mut da);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(&shape, da));
                }
                if self.needs(*b) {
                    let av = self.mat_view(*a, *ta);
                    let shape = self.shape(*b).to_vec();
                    let mut db = vec![0.0; shape[0] * shape[1]];
                    if *tb {
                        gemm(1.0, dc.t(), av, 0.0, &mut db);
                    } else {
                        gemm(1.0, av.t(), dc, 0.0, &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db));
                }
            }
            Op::AddRowBias(x, b) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gout.clone());
                }
                if self.needs(*b) {
                    let (rows, cols) = gout.rows_cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (d, g) in db.iter_mut().zip(gout.row(r)) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gout.clone());
                }
                if self.needs(*b) {
                    let (rows, _) = gout.rows_cols();
                    let db = (0..rows).map(|r| gout.row(r).iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Relu(x) => {
                let mut g = gout.clone();
                for (gv, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::QuickGelu(x) => {
                let mut g = gout.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let s = sigmoid(1.702 * xv);
                    *gv *= s + 1.702 * xv * s * (1.0 - s);
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.rows_cols();
                let g = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = gout.row(r);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat;
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * g[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat;
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        dx[r * cols + j] = rstd * (dxhat[j] - m1 - xhat * m2);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), db));
                }
            }
            Op::FrozenBatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (channels, _) = xv.rows_cols();
                let g = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut dx = gout.clone();
                    for c in 0..channels {
                        let s = g[c] * inv_std[c];
                        dx.row_mut(c).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let dg = (0..channels)
                        .map(|c| {
                            gout.row(c)
                                .iter()
                                .zip(xv.row(c))
                                .map(|(d, xv)| d * (xv - mean[c]) * inv_std[c])
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg));
                }
                if self.needs(*beta) {
                    let db = (0..channels).map(|c| gout.row(c).iter().sum()).collect();
                    self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), db));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let ws = self.shape(*w).to_vec();
                let k = geom.channels * geom.kh * geom.kw;
                let p = geom.out_h * geom.out_w;
                let dy = MatRef::new(gout.data(), ws[0], p);
                if self.needs(*w) {
                    let mut dw = vec![0.0; ws[0] * k];
                    if geom.is_pointwise() {
                        gemm(1.0, dy, MatRef::new(self.value(*x).data(), k, p).t(), 0.0, &mut dw);
                    } else {
                        let cols = kernels::im2col(self.value(*x).data(), geom);
                        gemm(1.0, dy, MatRef::new(&cols, k, p).t(), 0.0, &mut dw);
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if self.needs(*x) {
                    let wm = MatRef::new(self.value(*w).data(), ws[0], k);
                    let mut dcols = vec![0.0; k * p];
                    gemm(1.0, wm.t(), dy, 0.0, &mut dcols);
                    let xs = self.shape(*x).to_vec();
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![0.0; xs.iter().product()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let ws = self.shape(*w).to_vec();
                let xs = self.shape(*x).to_vec();
                let cin = ws[0];
                let hw = xs[1] * xs[2];
                let k = geom.channels * geom.kh * geom.kw;
                let dcols = kernels::im2col(gout.data(), geom);
                let dcm = MatRef::new(&dcols, k, hw);
                if self.needs(*x) {
                    let mut dx = vec![0.0; cin * hw];
                    gemm(1.0, MatRef::new(self.value(*w).data(), cin, k), dcm, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cin * k];
                    gemm(1.0, MatRef::new(self.value(*x).data(), cin, hw), dcm.t(), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh * k {
                        for j in 0..ow * k {
                            dx[ch * h * w + i * w + j] = gout.data()[ch * oh * ow + (i / k) * ow + j / k] * norm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Reshape(x) => {
                let g = gout.clone().reshape(self.shape(*x));
                self.accumulate(grads, *x, g);
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, gout.transpose());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let g = Tensor::from_vec(self.shape(p), gout.data()[offset..offset + n].to_vec());
                        self.accumulate(grads, p, g);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let mut g = Tensor::zeros(self.shape(*x));
                let (_, cols) = g.rows_cols();
                g.data_mut()[start * cols..start * cols + gout.len()].copy_from_slice(gout.data());
                self.accumulate(grads, *x, g);
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x).to_vec();
                let rows = xs[0];
                let mut g = Tensor::zeros(&xs);
                for r in 0..rows {
                    for (d, s) in g.row_mut(r).iter_mut().zip(gout.data()) {
                        *d = s / rows as f64;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut g = gout.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let proj = crate::math::dot(yr, gout.row(r));
                    let gr = g.row_mut(r);
                    if n < NORM_EPS {
                        gr.iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * proj) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let ag = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gout.data(),
                    dims,
                );
                for (var, d) in [(*q, ag.dq), (*k, ag.dk), (*v, ag.dv)] {
                    if self.needs(var) {
                        self.accumulate(grads, var, Tensor::from_vec(self.shape(var), d));
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                let g = resize_backward(gout, self.shape(*x));
                self.accumulate(grads, *x, g);
            }
            Op::SamplePoints { x, points } => {
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; c * h * w];
                for (n, p) in points.iter().enumerate() {
                    let Some([u, v]) = *p else { continue };
                    for (yi, xi, wt) in bilinear_corners(u, v, h, w) {
                        for ch in 0..c {
                            dx[ch * h * w + yi * w + xi] += wt * gout.data()[n * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::MaskedMse { pred, target, mask } => {
                let p = self.value(*pred);
                let (rows, cols) = p.rows_cols();
                let count = mask.iter().filter(|m| **m).count() * cols;
                let mut g = Tensor::zeros(p.shape());
                if count > 0 {
                    let s = 2.0 * gout.item() / count as f64;
                    for r in (0..rows).filter(|r| mask[*r]) {
                        let (pr, tr) = (p.row(r), target.row(r));
                        for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = s * (pr[j] - tr[j]);
                        }
                    }
                }
                self.accumulate(grads, *pred, g);
            }
            Op::DiagContrastive { m, mask } => {
                let g = diag_contrastive_grad(self.value(*m), mask, gout.item());
                self.accumulate(grads, *m, g);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 3, "resize expects [c, h, w]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oi, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oi * out_w + oj] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

fn resize_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (gout.dim(1), gout.dim(2));
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &gout.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = g[oi * out_w + oj];
                d[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                d[y0 * w + x1] += gv * (1.0 - wy) * wx;
                d[y1 * w + x0] += gv * wy * (1.0 - wx);
                d[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    Tensor::from_vec(in_shape, dx)
}

pub(crate) fn resize_values(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    resize_forward(x, out_h, out_w)
}

/// Log-sum-exp of `values`.
fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(values.map(|v| libm::exp(v - max)).sum::<f64>())
}

fn diag_contrastive_value(m: &Tensor, mask: &[bool]) -> f64 {
    let n = m.dim(0);
    let vis: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if vis.is_empty() {
        return 0.0;
    }
    let d = m.data();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for &i in &vis {
        rows += logsumexp(vis.iter().map(|&j| d[i * n + j])) - d[i * n + i];
        cols += logsumexp(vis.iter().map(|&j| d[j * n + i])) - d[i * n + i];
    }
    0.5 * (rows + cols) / vis.len() as f64
}

fn diag_contrastive_grad(m: &Tensor, mask: &[bool], upstream: f64) -> Tensor {
    let n = m.dim(0);
    let vis: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut g = Tensor::zeros(&[n, n]);
    if vis.is_empty() {
        return g;
    }
    let d = m.data();
    let s = upstream * 0.5 / vis.len() as f64;
    for &i in &vis {
        let lse_row = logsumexp(vis.iter().map(|&j| d[i * n + j]));
        let lse_col = logsumexp(vis.iter().map(|&j| d[j * n + i]));
        for &j in &vis {
            // Row i's softmax over columns, and column i's softmax over rows.
            let gd = g.data_mut();
            gd[i * n + j] += s * libm::exp(d[i * n + j] - lse_row);
            gd[j * n + i] += s * libm::exp(d[j * n + i] - lse_col);
        }
        g.data_mut()[i * n + i] -= 2.0 * s;
    }
    g
}

#[cfg(test)]
mod tests;

//! Parameterized layers built on [`Graph`] ops.
//!
//! Weight layouts follow PyTorch so released checkpoints map one-to-one:
//! linear weights are `[out, in]`, convolutions `[out, in, kh, kw]` and
//! transposed convolutions `[in, out, kh, kw]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{kaiming_tensor, normal_tensor, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix with a fixed group.
pub struct Scope<'s, R: Rng + ?Sized> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
    prefix: String,
    pub group: ParamGroup,
}

impl<'s, R: Rng + ?Sized> Scope<'s, R> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut R, prefix: &str, group: ParamGroup) -> Self {
        Scope {
            store,
            rng,
            prefix: prefix.into(),
            group,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.into()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn sub(&mut self, leaf: &str) -> Scope<'_, R> {
        let prefix = self.name(leaf);
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Scope<'_, R> {
        Scope {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            group,
        }
    }

    pub fn add(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(&name, value, self.group)
    }

    pub fn add_frozen(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(&name, value, ParamGroup::Frozen)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal_tensor(self.rng, shape, std);
        self.add(leaf, t)
    }

    pub fn kaiming(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = kaiming_tensor(self.rng, shape, fan_in);
        self.add(leaf, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.add(leaf, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.add(leaf, Tensor::full(shape, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = s.normal("weight", &[d_out, d_in], 1.0 / libm::sqrt(d_in as f64));
        let bias = bias.then(|| s.zeros("bias", &[d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zero_init<R: Rng + ?Sized>(s: &mut Scope<'_, R>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = s.zeros("weight", &[d_out, d_in]);
        let bias = bias.then(|| s.zeros("bias", &[d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x [rows, d_in] -> [rows, d_out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul_t(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, width: usize) -> Self {
        LayerNorm {
            weight: s.ones("weight", &[width]),
            bias: s.zeros("bias", &[width]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.layer_norm(x, w, b, self.eps)
    }
}

/// Multi-head attention with separate query/key/value projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiheadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiheadAttention {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, width: usize, heads: usize, zero_out: bool) -> Self {
        Self::with_out_width(s, width, width, heads, zero_out)
    }

    pub fn with_out_width<R: Rng + ?Sized>(
        s: &mut Scope<'_, R>,
        width: usize,
        out_width: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert!(heads >= 1 && width % heads == 0, "width {width} not divisible by {heads} heads");
        let q = Linear::new(&mut s.sub("q_proj"), width, width, true);
        let k = Linear::new(&mut s.sub("k_proj"), width, width, true);
        let v = Linear::new(&mut s.sub("v_proj"), width, width, true);
        let out = if zero_out {
            Linear::zero_init(&mut s.sub("out_proj"), width, out_width, true)
        } else {
            Linear::new(&mut s.sub("out_proj"), width, out_width, true)
        };
        MultiheadAttention { q, k, v, out, heads }
    }

    /// Queries from `xq [lq, d]`, keys and values from `xkv [lk, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, xq: Var, xkv: Var, causal: bool) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, self.heads, causal);
        self.out.forward(g, a)
    }

    /// Self-attention over several sequences stacked row-wise in `x`;
    /// `segments` holds `(start, len)` of each and must tile `x` in order.
    pub fn forward_packed(&self, g: &mut Graph<'_>, x: Var, segments: &[(usize, usize)], causal: bool) -> Var {
        if let [(0, _)] = segments {
            return self.forward(g, x, x, causal);
        }
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let parts: Vec<Var> = segments
            .iter()
            .map(|&(start, len)| {
                let (qs, ks, vs) = (g.slice_rows(q, start, len), g.slice_rows(k, start, len), g.slice_rows(v, start, len));
                g.attention(qs, ks, vs, self.heads, causal)
            })
            .collect();
        let a = g.concat(&parts);
        self.out.forward(g, a)
    }
}

/// Pre-LN transformer block with a QuickGELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBlock {
    pub ln_1: LayerNorm,
    pub attn: MultiheadAttention,
    pub ln_2: LayerNorm,
    pub c_fc: Linear,
    pub c_proj: Linear,
}

impl ResidualBlock {
    /// With `identity_init` both residual branches start at zero, so the
    /// block is the identity map until trained.
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, width: usize, heads: usize, identity_init: bool) -> Self {
        let ln_1 = LayerNorm::new(&mut s.sub("ln_1"), width);
        let attn = MultiheadAttention::new(&mut s.sub("attn"), width, heads, identity_init);
        let ln_2 = LayerNorm::new(&mut s.sub("ln_2"), width);
        let c_fc = Linear::new(&mut s.sub("mlp.c_fc"), width, 4 * width, true);
        let c_proj = if identity_init {
            Linear::zero_init(&mut s.sub("mlp.c_proj"), 4 * width, width, true)
        } else {
            Linear::new(&mut s.sub("mlp.c_proj"), 4 * width, width, true)
        };
        ResidualBlock {
            ln_1,
            attn,
            ln_2,
            c_fc,
            c_proj,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Var {
        let rows = g.shape(x)[0];
        self.forward_packed(g, x, &[(0, rows)], causal)
    }

    /// Runs the block over sequences stacked row-wise; attention stays
    /// within each `(start, len)` segment.
    pub fn forward_packed(&self, g: &mut Graph<'_>, x: Var, segments: &[(usize, usize)], causal: bool) -> Var {
        let h = self.ln_1.forward(g, x);
        let a = self.attn.forward_packed(g, h, segments, causal);
        let x = g.add(x, a);
        let h = self.ln_2.forward(g, x);
        let h = self.c_fc.forward(g, h);
        let h = g.quick_gelu(h);
        let h = self.c_proj.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        s: &mut Scope<'_, R>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = s.kaiming("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        let bias = bias.then(|| s.zeros("bias", &[c_out]));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Stride-2 4x4 transposed convolution without bias.
#[derive(Clone, Copy, Debug)]
pub struct Deconv {
    pub weight: ParamId,
}

impl Deconv {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, c_in: usize, c_out: usize) -> Self {
        // Each output cell receives 2x2 kernel taps per input channel.
        Deconv {
            weight: s.kaiming("weight", &[c_in, c_out, 4, 4], c_in * 4),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        g.conv_transpose2d(x, w, 2, 1)
    }
}

/// Batch normalization evaluated with its running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, channels: usize) -> Self {
        BatchNorm {
            weight: s.ones("weight", &[channels]),
            bias: s.zeros("bias", &[channels]),
            running_mean: s.add_frozen("running_mean", Tensor::zeros(&[channels])),
            running_var: s.add_frozen("running_var", Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let store = g.store();
        let (mean, var) = (store.value(self.running_mean), store.value(self.running_var));
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.frozen_batch_norm(x, w, b, mean, var, self.eps)
    }
}

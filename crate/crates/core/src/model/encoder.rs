use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Conv2d, LayerNorm, Linear, ResidualBlock, Scope};
use crate::params::{ParamGroup, ParamId};

/// Image encoder architecture and widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    /// Four plain conv stages at total stride 32, with a linear projector.
    ToyCnn { channels: [usize; 4], embed_dim: usize },
    /// CLIP's modified ResNet with an attention-pool projector.
    Resnet {
        layers: [usize; 4],
        width: usize,
        heads: usize,
        embed_dim: usize,
        /// Side of the positional grid the projector was trained with.
        pretrained_grid: usize,
    },
    /// CLIP's vision transformer with a linear projector.
    Vit {
        patch: usize,
        width: usize,
        layers: usize,
        heads: usize,
        embed_dim: usize,
        pretrained_grid: usize,
    },
}

impl EncoderConfig {
    pub const TOY: EncoderConfig = EncoderConfig::ToyCnn {
        channels: [16, 32, 48, 64],
        embed_dim: 32,
    };

    pub const CLIP_RN50: EncoderConfig = EncoderConfig::Resnet {
        layers: [3, 4, 6, 3],
        width: 64,
        heads: 32,
        embed_dim: 1024,
        pretrained_grid: 7,
    };

    pub const CLIP_VIT_B16: EncoderConfig = EncoderConfig::Vit {
        patch: 16,
        width: 768,
        layers: 12,
        heads: 12,
        embed_dim: 512,
        pretrained_grid: 14,
    };

    pub fn kind_name(&self) -> &'static str {
        match self {
            EncoderConfig::ToyCnn { .. } => "toy-cnn",
            EncoderConfig::Resnet { .. } => "resnet",
            EncoderConfig::Vit { .. } => "vit",
        }
    }

    /// Input pixels per output cell.
    pub fn stride(&self) -> usize {
        match *self {
            EncoderConfig::ToyCnn { .. } | EncoderConfig::Resnet { .. } => 32,
            EncoderConfig::Vit { patch, .. } => patch,
        }
    }

    /// Channel count of the raw feature map.
    pub fn channels(&self) -> usize {
        match *self {
            EncoderConfig::ToyCnn { channels, .. } => channels[3],
            EncoderConfig::Resnet { width, .. } => width * 32,
            EncoderConfig::Vit { width, .. } => width,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match *self {
            EncoderConfig::ToyCnn { embed_dim, .. }
            | EncoderConfig::Resnet { embed_dim, .. }
            | EncoderConfig::Vit { embed_dim, .. } => embed_dim,
        }
    }
}

/// Raw features `[C, H, W]` plus the class token of transformer encoders.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub origin: Var,
    pub cls: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ToyCnn {
    pub convs: [Conv2d; 4],
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, idx: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvBn {
            conv: Conv2d::new(&mut s.sub(&format!("conv{idx}")), c_in, c_out, k, stride, k / 2, false),
            bn: BatchNorm::new(&mut s.sub(&format!("bn{idx}")), c_out),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        self.bn.forward(g, y)
    }
}

/// CLIP ResNet bottleneck; strided blocks average-pool before the
/// expanding convolution.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    downsample: Option<(Conv2d, BatchNorm)>,
    stride: usize,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, inplanes: usize, planes: usize, stride: usize) -> Self {
        let c1 = ConvBn::new(s, "1", inplanes, planes, 1, 1);
        let c2 = ConvBn::new(s, "2", planes, planes, 3, 1);
        let c3 = ConvBn::new(s, "3", planes, planes * 4, 1, 1);
        let downsample = (stride > 1 || inplanes != planes * 4).then(|| {
            (
                Conv2d::new(&mut s.sub("downsample.1"), inplanes, planes * 4, 1, 1, 0, false),
                BatchNorm::new(&mut s.sub("downsample.2"), planes * 4),
            )
        });
        Bottleneck {
            c1,
            c2,
            c3,
            downsample,
            stride,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.c1.forward(g, x);
        let y = g.relu(y);
        let y = self.c2.forward(g, y);
        let mut y = g.relu(y);
        if self.stride > 1 {
            y = g.avg_pool(y, self.stride);
        }
        let y = self.c3.forward(g, y);
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let d = if self.stride > 1 { g.avg_pool(x, self.stride) } else { x };
                let d = conv.forward(g, d);
                bn.forward(g, d)
            }
            None => x,
        };
        let sum = g.add(y, identity);
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct ModifiedResNet {
    stem: [ConvBn; 3],
    layers: Vec<Vec<Bottleneck>>,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub conv1: Conv2d,
    pub class_embedding: ParamId,
    pub positional_embedding: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<ResidualBlock>,
    pub pretrained_grid: usize,
}

#[derive(Clone, Debug)]
pub enum ImageEncoder {
    ToyCnn(ToyCnn),
    Resnet(ModifiedResNet),
    Vit(VisionTransformer),
}

impl ImageEncoder {
    /// Registers the encoder under `s` in the backbone group.
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, config: &EncoderConfig) -> Self {
        let mut s = s.with_group(ParamGroup::Backbone);
        match *config {
            EncoderConfig::ToyCnn { channels: c, .. } => {
                let stem = Conv2d::new(&mut s.sub("stem"), 3, c[0], 4, 4, 0, true);
                let stage = |s: &mut Scope<'_, R>, i: usize| {
                    Conv2d::new(&mut s.sub(&format!("stage{i}")), c[i - 1], c[i], 3, 2, 1, true)
                };
                let convs = [stem, stage(&mut s, 1), stage(&mut s, 2), stage(&mut s, 3)];
                ImageEncoder::ToyCnn(ToyCnn { convs })
            }
            EncoderConfig::Resnet { layers, width, .. } => {
                let stem = [
                    ConvBn::new(&mut s, "1", 3, width / 2, 3, 2),
                    ConvBn::new(&mut s, "2", width / 2, width / 2, 3, 1),
                    ConvBn::new(&mut s, "3", width / 2, width, 3, 1),
                ];
                let mut inplanes = width;
                let mut stages = Vec::new();
                for (i, &blocks) in layers.iter().enumerate() {
                    let planes = width << i;
                    let stride = if i == 0 { 1 } else { 2 };
                    let mut stage = Vec::new();
                    for b in 0..blocks {
                        let mut sb = s.sub(&format!("layer{}.{b}", i + 1));
                        stage.push(Bottleneck::new(&mut sb, inplanes, planes, if b == 0 { stride } else { 1 }));
                        inplanes = planes * 4;
                    }
                    stages.push(stage);
                }
                ImageEncoder::Resnet(ModifiedResNet { stem, layers: stages })
            }
            EncoderConfig::Vit {
                patch,
                width,
                layers,
                heads,
                pretrained_grid,
                ..
            } => {
                let conv1 = Conv2d::new(&mut s.sub("conv1"), 3, width, patch, patch, 0, false);
                let scale = 1.0 / libm::sqrt(width as f64);
                let class_embedding = s.normal("class_embedding", &[width], scale);
                let positional_embedding =
                    s.normal("positional_embedding", &[pretrained_grid * pretrained_grid + 1, width], scale);
                let ln_pre = LayerNorm::new(&mut s.sub("ln_pre"), width);
                let blocks = (0..layers)
                    .map(|i| ResidualBlock::new(&mut s.sub(&format!("transformer.resblocks.{i}")), width, heads, false))
                    .collect();
                ImageEncoder::Vit(VisionTransformer {
                    conv1,
                    class_embedding,
                    positional_embedding,
                    ln_pre,
                    blocks,
                    pretrained_grid,
                })
            }
        }
    }

    /// `image [3, h, w]` to raw features.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> EncoderOutput {
        match self {
            ImageEncoder::ToyCnn(t) => {
                let mut x = image;
                for conv in &t.convs {
                    let y = conv.forward(g, x);
                    x = g.relu(y);
                }
                EncoderOutput { origin: x, cls: None }
            }
            ImageEncoder::Resnet(r) => {
                let mut x = image;
                for cb in &r.stem {
                    let y = cb.forward(g, x);
                    x = g.relu(y);
                }
                x = g.avg_pool(x, 2);
                for stage in &r.layers {
                    for block in stage {
                        x = block.forward(g, x);
                    }
                }
                EncoderOutput { origin: x, cls: None }
            }
            ImageEncoder::Vit(v) => {
                let patches = v.conv1.forward(g, image);
                let s = g.shape(patches).to_vec();
                let (width, gh, gw) = (s[0], s[1], s[2]);
                let tokens = crate::adapt::feature_tokens(g, patches);
                let cls = g.param(v.class_embedding);
                let cls = g.reshape(cls, &[1, width]);
                let x = g.concat(&[cls, tokens]);
                let pos = g.param(v.positional_embedding);
                let pos = resize_positional(g, pos, v.pretrained_grid, (gh, gw));
                let x = g.add(x, pos);
                let mut x = v.ln_pre.forward(g, x);
                for block in &v.blocks {
                    x = block.forward(g, x, false);
                }
                let cls = g.slice_rows(x, 0, 1);
                let cells = g.slice_rows(x, 1, gh * gw);
                let cells = g.transpose(cells);
                let origin = g.reshape(cells, &[width, gh, gw]);
                EncoderOutput {
                    origin,
                    cls: Some(cls),
                }
            }
        }
    }
}

/// Positional table `[1 + g*g, w]` resampled to `[1 + gh*gw, w]`. The first
/// row belongs to the global token and is kept as is.
pub fn resize_positional(g: &mut Graph<'_>, pos: Var, grid: usize, (gh, gw): (usize, usize)) -> Var {
    if (gh, gw) == (grid, grid) {
        return pos;
    }
    let w = g.shape(pos)[1];
    let head = g.slice_rows(pos, 0, 1);
    let cells = g.slice_rows(pos, 1, grid * grid);
    let cells = g.transpose(cells);
    let cells = g.reshape(cells, &[w, grid, grid]);
    let cells = g.resize_bilinear(cells, gh, gw);
    let cells = g.reshape(cells, &[w, gh * gw]);
    let cells = g.transpose(cells);
    g.concat(&[head, cells])
}

/// Maps raw features into the text embedding space.
#[derive(Clone, Debug)]
pub enum Projector {
    /// Per-cell linear map.
    Linear(Linear),
    /// Attention pooling that keeps its per-position outputs; the mean
    /// token's output is the global embedding.
    AttnPool {
        positional_embedding: ParamId,
        q: Linear,
        k: Linear,
        v: Linear,
        c_proj: Linear,
        heads: usize,
        pretrained_grid: usize,
    },
    /// Final layer norm and projection applied to every token.
    VitLinear { ln_post: LayerNorm, proj: ParamId },
}

/// Projected features `[C_emb, H, W]` and an optional global token `[1, C_emb]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectorOutput {
    pub projected: Var,
    pub global: Option<Var>,
}

impl Projector {
    /// Registers the projector in the head group.
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, config: &EncoderConfig) -> Self {
        let mut s = s.with_group(ParamGroup::Head);
        match *config {
            EncoderConfig::ToyCnn { channels, embed_dim } => {
                Projector::Linear(Linear::new(&mut s.sub("proj"), channels[3], embed_dim, true))
            }
            EncoderConfig::Resnet {
                width,
                heads,
                embed_dim,
                pretrained_grid,
                ..
            } => {
                let c = width * 32;
                let positional_embedding = s.normal(
                    "positional_embedding",
                    &[pretrained_grid * pretrained_grid + 1, c],
                    1.0 / libm::sqrt(c as f64),
                );
                Projector::AttnPool {
                    positional_embedding,
                    q: Linear::new(&mut s.sub("q_proj"), c, c, true),
                    k: Linear::new(&mut s.sub("k_proj"), c, c, true),
                    v: Linear::new(&mut s.sub("v_proj"), c, c, true),
                    c_proj: Linear::new(&mut s.sub("c_proj"), c, embed_dim, true),
                    heads,
                    pretrained_grid,
                }
            }
            EncoderConfig::Vit { width, embed_dim, .. } => Projector::VitLinear {
                ln_post: LayerNorm::new(&mut s.sub("ln_post"), width),
                proj: s.normal("proj", &[width, embed_dim], 1.0 / libm::sqrt(width as f64)),
            },
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, enc: EncoderOutput) -> ProjectorOutput {
        let s = g.shape(enc.origin).to_vec();
        let (h, w) = (s[1], s[2]);
        let tokens = crate::adapt::feature_tokens(g, enc.origin);
        let to_map = |g: &mut Graph<'_>, rows: Var| {
            let d = g.shape(rows)[1];
            let t = g.transpose(rows);
            g.reshape(t, &[d, h, w])
        };
        match self {
            Projector::Linear(lin) => {
                let p = lin.forward(g, tokens);
                ProjectorOutput {
                    projected: to_map(g, p),
                    global: None,
                }
            }
            Projector::AttnPool {
                positional_embedding,
                q,
                k,
                v,
                c_proj,
                heads,
                pretrained_grid,
            } => {
                let mean = g.mean_rows(tokens);
                let x = g.concat(&[mean, tokens]);
                let pos = g.param(*positional_embedding);
                let pos = resize_positional(g, pos, *pretrained_grid, (h, w));
                let x = g.add(x, pos);
                let (qv, kv, vv) = (q.forward(g, x), k.forward(g, x), v.forward(g, x));
                let a = g.attention(qv, kv, vv, *heads, false);
                let out = c_proj.forward(g, a);
                let global = g.slice_rows(out, 0, 1);
                let cells = g.slice_rows(out, 1, h * w);
                ProjectorOutput {
                    projected: to_map(g, cells),
                    global: Some(global),
                }
            }
            Projector::VitLinear { ln_post, proj } => {
                let cls = enc.cls.expect("transformer encoders emit a class token");
                let x = g.concat(&[cls, tokens]);
                let x = ln_post.forward(g, x);
                let p = g.param(*proj);
                let out = g.matmul(x, p);
                let global = g.slice_rows(out, 0, 1);
                let cells = g.slice_rows(out, 1, h * w);
                ProjectorOutput {
                    projected: to_map(g, cells),
                    global: Some(global),
                }
            }
        }
    }
}

pub(crate) fn check_input(config: &EncoderConfig, input: (usize, usize)) -> Result<()> {
    let s = config.stride();
    if input.0 == 0 || input.1 == 0 || input.0 % s != 0 || input.1 % s != 0 {
        return Err(Error::Config(format!(
            "input size {input:?} is not a positive multiple of the {} stride {s}",
            config.kind_name()
        )));
    }
    if let EncoderConfig::Resnet { width, heads, .. } = *config {
        if width < 2 || (width * 32) % heads != 0 {
            return Err(Error::Config(format!("resnet width {width} with {heads} heads is inconsistent")));
        }
    }
    if let EncoderConfig::Vit { width, heads, .. } = *config {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("vit width {width} is not divisible by {heads} heads")));
        }
    }
    Ok(())
}

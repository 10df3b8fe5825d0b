use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{MultiheadAttention, ResidualBlock, Scope};
use crate::params::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub heads: usize,
    /// Run the transformer layer over the prompt rows.
    pub self_attention: bool,
    /// Attend from prompts to image features.
    pub cross_attention: bool,
    pub gamma_init: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            heads: 8,
            self_attention: true,
            cross_attention: true,
            gamma_init: 1e-4,
        }
    }
}

/// Relates keypoint prompts to each other, then to one image.
///
/// `out = p + gamma * CrossAttn(p, image)` with `p = Block(prompts)`. The
/// block's residual branches are zero-initialized so it starts as the
/// identity; there is no normalization or feed-forward after the
/// cross-attention.
#[derive(Clone, Debug)]
pub struct PromptRefiner {
    pub config: RefinerConfig,
    pub width: usize,
    pub block: Option<ResidualBlock>,
    pub cross: Option<MultiheadAttention>,
    pub gamma: Option<ParamId>,
}

impl PromptRefiner {
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, width: usize, config: RefinerConfig) -> Result<Self> {
        if config.heads == 0 || width % config.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "prompt refiner width {width} is not divisible by {} heads",
                config.heads
            )));
        }
        let block = config
            .self_attention
            .then(|| ResidualBlock::new(&mut s.sub("prompt_encoder"), width, config.heads, true));
        let cross = config
            .cross_attention
            .then(|| MultiheadAttention::new(&mut s.sub("cross_attn"), width, config.heads, false));
        let gamma = config
            .cross_attention
            .then(|| s.add("gamma", Tensor::from_vec(&[1], alloc::vec![config.gamma_init])));
        Ok(PromptRefiner {
            config,
            width,
            block,
            cross,
            gamma,
        })
    }

    /// `prompts [N, C]`, `image [T, C]` (flattened feature cells plus any
    /// global tokens) to enhanced prompts `[N, C]`.
    pub fn forward(&self, g: &mut Graph<'_>, prompts: Var, image: Var) -> Var {
        let p = match &self.block {
            Some(b) => b.forward(g, prompts, false),
            None => prompts,
        };
        match (&self.cross, self.gamma) {
            (Some(cross), Some(gamma)) => {
                let c = cross.forward(g, p, image, false);
                let gamma = g.param(gamma);
                let c = g.scale_by(c, gamma);
                g.add(p, c)
            }
            _ => p,
        }
    }
}

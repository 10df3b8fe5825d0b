use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PromptTemplate;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, ResidualBlock, Scope};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::Tensor;

/// Shape of a CLIP-style causal text transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the shared image-text embedding space.
    pub embed_dim: usize,
}

impl TextConfig {
    /// The text tower released with CLIP ResNet-50.
    pub const CLIP_RN50: TextConfig = TextConfig {
        vocab_size: 49408,
        context_length: 77,
        width: 512,
        layers: 12,
        heads: 8,
        embed_dim: 1024,
    };

    /// The text tower released with CLIP ViT-B/16.
    pub const CLIP_VIT_B16: TextConfig = TextConfig {
        embed_dim: 512,
        ..Self::CLIP_RN50
    };

    /// A one-layer tower for tests and desk-scale runs.
    pub fn toy(vocab_size: usize, embed_dim: usize) -> Self {
        TextConfig {
            vocab_size,
            context_length: 16,
            width: 32,
            layers: 1,
            heads: 4,
            embed_dim,
        }
    }
}

/// Frozen text encoder. Prefix vectors are spliced in after the start token
/// and before the positional embedding is added.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub token_embedding: ParamId,
    pub positional_embedding: ParamId,
    pub blocks: Vec<ResidualBlock>,
    pub ln_final: LayerNorm,
    pub text_projection: ParamId,
}

impl TextEncoder {
    /// Randomly initialized; every parameter lands in the frozen group.
    pub fn new<R: Rng + ?Sized>(s: &mut Scope<'_, R>, config: TextConfig) -> Self {
        let mut s = s.with_group(ParamGroup::Frozen);
        let w = config.width;
        let token_embedding = s.normal("token_embedding.weight", &[config.vocab_size, w], 0.02);
        let positional_embedding = s.normal("positional_embedding", &[config.context_length, w], 0.01);
        let blocks = (0..config.layers)
            .map(|i| ResidualBlock::new(&mut s.sub(&format!("transformer.resblocks.{i}")), w, config.heads, false))
            .collect();
        let ln_final = LayerNorm::new(&mut s.sub("ln_final"), w);
        let text_projection = s.normal("text_projection", &[w, config.embed_dim], 1.0 / libm::sqrt(w as f64));
        TextEncoder {
            config,
            token_embedding,
            positional_embedding,
            blocks,
            ln_final,
            text_projection,
        }
    }

    /// Token rows for fixed ids, as a constant.
    fn embed_ids(&self, g: &Graph<'_>, ids: &[u32]) -> Result<Tensor> {
        let table = g.store().value(self.token_embedding);
        let w = self.config.width;
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::shape(
                    "encode_prompts",
                    format!("token id {id} outside vocabulary of {}", self.config.vocab_size),
                ));
            }
            out.extend_from_slice(table.row(id));
        }
        Ok(Tensor::from_vec(&[ids.len(), w], out))
    }

    /// Embeds every prompt of `template`, giving `[N, embed_dim]`.
    /// Gradients reach only the prefix vectors.
    pub fn encode(&self, g: &mut Graph<'_>, template: &PromptTemplate) -> Result<Var> {
        let w = self.config.width;
        let prefix_shape = g.store().value(template.prefix).shape().to_vec();
        if prefix_shape != [template.k, w] {
            return Err(Error::shape(
                "encode_prompts",
                format!("prefix is {prefix_shape:?}, text encoder expects [{}, {w}]", template.k),
            ));
        }
        let prefix = g.param(template.prefix);
        let pos_table = g.store().value(self.positional_embedding);
        let mut pieces = Vec::new();
        let mut segments = Vec::new();
        let mut eot_rows = Vec::new();
        let mut start = 0;
        for ids in &template.keypoint_token_ids {
            let len = template.k + ids.len() + 2;
            if len > self.config.context_length {
                return Err(Error::shape(
                    "encode_prompts",
                    format!("prompt of {len} tokens exceeds context {}", self.config.context_length),
                ));
            }
            let sot = self.embed_ids(g, &[template.sot])?;
            let name = self.embed_ids(g, ids)?;
            let eot = self.embed_ids(g, &[template.eot])?;
            let (sot, name, eot) = (g.constant(sot), g.constant(name), g.constant(eot));
            let seq = g.concat(&[sot, prefix, name, eot]);
            let pos = Tensor::from_vec(&[len, w], pos_table.data()[..len * w].to_vec());
            let pos = g.constant(pos);
            pieces.push(g.add(seq, pos));
            segments.push((start, len));
            eot_rows.push(start + len - 1);
            start += len;
        }
        let mut x = g.concat(&pieces);
        for block in &self.blocks {
            x = block.forward_packed(g, x, &segments, true);
        }
        // The causal mask makes the end-token row independent of padding,
        // so sequences are never padded to the full context.
        let pooled: Vec<Var> = eot_rows.iter().map(|&r| g.slice_rows(x, r, 1)).collect();
        let pooled = g.concat(&pooled);
        let pooled = self.ln_final.forward(g, pooled);
        let proj = g.param(self.text_projection);
        Ok(g.matmul(pooled, proj))
    }
}

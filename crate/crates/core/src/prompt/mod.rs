//! Pose-specific prompts: `k` shared learnable prefix vectors followed by
//! the tokens of one keypoint name, embedded by a frozen text encoder and
//! refined per image.

mod refine;
mod text;
mod tokenizer;

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use refine::{PromptRefiner, RefinerConfig};
pub use text::{TextConfig, TextEncoder};
pub use tokenizer::{keypoint_text, Tokenizer, WordVocab};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Scope;
use crate::params::{ParamId, ParamStore};
use crate::schema::KeypointSchema;
use crate::tensor::Tensor;

/// Default number of prefix tokens.
pub const DEFAULT_PREFIX_LEN: usize = 8;
/// Standard deviation of the prefix initialization.
pub const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    /// `[k, text width]`, shared by all keypoints.
    pub prefix: ParamId,
    pub k: usize,
    pub keypoint_names: Vec<alloc::string::String>,
    pub keypoint_token_ids: Vec<Vec<u32>>,
    pub sot: u32,
    pub eot: u32,
}

impl PromptTemplate {
    pub fn num_keypoints(&self) -> usize {
        self.keypoint_token_ids.len()
    }
}

/// Tokenizes every keypoint name of `schema` and registers `k` prefix
/// vectors of width `text_width` under `prompt.prefix`.
pub fn build_prompts<R: Rng + ?Sized>(
    s: &mut Scope<'_, R>,
    schema: &KeypointSchema,
    k: usize,
    text_width: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<PromptTemplate> {
    if k == 0 {
        return Err(Error::Config("prefix length k must be at least 1".into()));
    }
    let keypoint_token_ids = schema
        .keypoint_names
        .iter()
        .map(|name| {
            tokenizer.tokenize(&keypoint_text(name)).map_err(|e| match e {
                Error::Untokenizable { reason, .. } => Error::Untokenizable {
                    name: name.clone(),
                    reason,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prefix = s.normal("prefix", &[k, text_width], PREFIX_INIT_STD);
    Ok(PromptTemplate {
        prefix,
        k,
        keypoint_names: schema.keypoint_names.clone(),
        keypoint_token_ids,
        sot: tokenizer.sot(),
        eot: tokenizer.eot(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// Straight out of the text encoder; shared by all images.
    Origin,
    /// Refined against one image.
    Enhanced,
}

/// `[N, C_emb]` prompt embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub values: Tensor,
    pub variant: PromptVariant,
}

/// Evaluates the origin embeddings outside any training graph.
pub fn encode_prompts(store: &ParamStore, encoder: &TextEncoder, template: &PromptTemplate) -> Result<PromptEmbedding> {
    let mut g = Graph::new(store);
    let e = encoder.encode(&mut g, template)?;
    Ok(PromptEmbedding {
        values: g.value(e).clone(),
        variant: PromptVariant::Origin,
    })
}

/// Memoizes [`encode_prompts`] on the prefix values and token ids.
#[derive(Clone, Debug, Default)]
pub struct PromptCache {
    key: Option<(Tensor, Vec<Vec<u32>>)>,
    value: Option<PromptEmbedding>,
    misses: usize,
}

impl PromptCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times the encoder actually ran.
    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn get(
        &mut self,
        store: &ParamStore,
        encoder: &TextEncoder,
        template: &PromptTemplate,
    ) -> Result<&PromptEmbedding> {
        let prefix = store.value(template.prefix);
        let hit = matches!(&self.key, Some((p, ids))
            if p.shape() == prefix.shape()
                && p.data().iter().zip(prefix.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                && *ids == template.keypoint_token_ids);
        if !hit || self.value.is_none() {
            self.value = Some(encode_prompts(store, encoder, template)?);
            self.key = Some((prefix.clone(), template.keypoint_token_ids.clone()));
            self.misses += 1;
        }
        Ok(self.value.as_ref().expect("filled above"))
    }
}

#[cfg(test)]
mod tests;

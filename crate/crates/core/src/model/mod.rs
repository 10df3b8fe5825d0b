//! Full model: image encoder, projector, prompts, adaptation and the
//! keypoint predictor, plus the prompt-free baseline.

mod encoder;
mod predictor;

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{
    resize_positional, EncoderConfig, EncoderOutput, ImageEncoder, Projector, ProjectorOutput,
};
pub use predictor::{deconv_stages, KeypointPredictor, HEATMAP_STRIDE};

use crate::adapt::{self, LogitScale, LossWeights, MatchMatrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heatmap::{decode_with, encode_gaussian, DecodeOptions, HeatmapStack, DEFAULT_SIGMA};
use crate::nn::Scope;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::prompt::{
    build_prompts, PromptRefiner, PromptTemplate, RefinerConfig, TextConfig, TextEncoder, Tokenizer,
    DEFAULT_PREFIX_LEN,
};
use crate::schema::KeypointSchema;
use crate::tensor::Tensor;

/// Initial value of the optional learnable logit scale.
pub const LEARNED_LOGIT_SCALE_INIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    /// Number of learnable prefix tokens per prompt.
    pub prefix_len: usize,
    pub refiner: RefinerConfig,
    /// Width of every deconvolution stage.
    pub deconv_channels: usize,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    /// Gaussian width of heatmap targets, in heatmap cells.
    pub sigma: f64,
    /// Learn the match-matrix logit scale instead of using the fixed one.
    pub learn_logit_scale: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(crate::prompt::WordVocab::anatomy().vocab_size())
    }
}

impl ModelConfig {
    /// Small enough to train on one CPU core.
    pub fn toy(vocab_size: usize) -> Self {
        let encoder = EncoderConfig::TOY;
        ModelConfig {
            encoder,
            text: TextConfig::toy(vocab_size, encoder.embed_dim()),
            prefix_len: DEFAULT_PREFIX_LEN,
            refiner: RefinerConfig::default(),
            deconv_channels: 32,
            input_size: crate::augment::INPUT_SIZE,
            sigma: DEFAULT_SIGMA,
            learn_logit_scale: false,
            seed: 0,
        }
    }

    pub fn clip_rn50() -> Self {
        ModelConfig {
            encoder: EncoderConfig::CLIP_RN50,
            text: TextConfig::CLIP_RN50,
            deconv_channels: 256,
            ..Self::toy(TextConfig::CLIP_RN50.vocab_size)
        }
    }

    pub fn clip_vit_b16() -> Self {
        ModelConfig {
            encoder: EncoderConfig::CLIP_VIT_B16,
            text: TextConfig::CLIP_VIT_B16,
            deconv_channels: 256,
            ..Self::toy(TextConfig::CLIP_VIT_B16.vocab_size)
        }
    }

    /// Feature-map size `(H, W)` of the encoder.
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.encoder.stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Predicted heatmap size `(h1, w1)`.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.0 / HEATMAP_STRIDE, self.input_size.1 / HEATMAP_STRIDE)
    }

    fn validate(&self) -> Result<()> {
        encoder::check_input(&self.encoder, self.input_size)?;
        deconv_stages(self.encoder.stride())?;
        if self.text.embed_dim != self.encoder.embed_dim() {
            return Err(Error::Config(format!(
                "text embedding width {} does not match image embedding width {}",
                self.text.embed_dim,
                self.encoder.embed_dim()
            )));
        }
        if self.text.heads == 0 || self.text.width % self.text.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} is not divisible by {} heads",
                self.text.width, self.text.heads
            )));
        }
        if self.prefix_len == 0 || self.deconv_channels == 0 || !(self.sigma > 0.0) {
            return Err(Error::Config(
                "prefix_len and deconv_channels must be positive and sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Heatmap targets for one sample.
#[derive(Clone, Debug)]
pub struct SampleTarget {
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
    pub heatmap: HeatmapStack,
    pub mask: Vec<bool>,
}

/// Graph nodes produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleGraph {
    pub l_pred: Var,
    pub l_spatial: Var,
    pub l_feature: Var,
    pub total: Var,
    pub heatmap: Var,
    pub scores: Var,
    pub matches: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_pred: f64,
    pub l_spatial: f64,
    pub l_feature: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub losses: LossComponents,
    pub heatmap: HeatmapStack,
    pub scores: HeatmapStack,
    pub matches: MatchMatrix,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Input-pixel `(x, y)` per keypoint.
    pub coords: Vec<[f64; 2]>,
    /// Heatmap value at each argmax.
    pub confidence: Vec<f64>,
    pub heatmap: HeatmapStack,
    pub scores: HeatmapStack,
}

#[derive(Clone, Debug)]
pub struct ClampModel {
    pub config: ModelConfig,
    pub schema: KeypointSchema,
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub projector: Projector,
    pub text: TextEncoder,
    pub template: PromptTemplate,
    pub refiner: PromptRefiner,
    pub predictor: KeypointPredictor,
    pub logit_scale: Option<ParamId>,
    pub weights: LossWeights,
    pub decode: DecodeOptions,
}

impl ClampModel {
    /// Builds and randomly initializes every component. Width mismatches
    /// between components fail here, never in a forward pass.
    pub fn new(config: ModelConfig, schema: &KeypointSchema, tokenizer: &dyn Tokenizer) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if tokenizer.vocab_size() > config.text.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} ids, text encoder embeds {}",
                tokenizer.vocab_size(),
                config.text.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut root = Scope::new(&mut store, &mut rng, "", ParamGroup::Head);
        let encoder = ImageEncoder::new(&mut root.sub("visual"), &config.encoder);
        let projector = match config.encoder {
            EncoderConfig::Resnet { .. } => Projector::new(&mut root.sub("visual.attnpool"), &config.encoder),
            _ => Projector::new(&mut root.sub("visual"), &config.encoder),
        };
        let text = TextEncoder::new(&mut root, config.text);
        let mut prompt_scope = root.sub("prompt");
        let template = build_prompts(&mut prompt_scope, schema, config.prefix_len, config.text.width, tokenizer)?;
        let refiner = PromptRefiner::new(&mut prompt_scope, config.text.embed_dim, config.refiner)?;
        let longest = template.keypoint_token_ids.iter().map(Vec::len).max().unwrap_or(0);
        if config.prefix_len + longest + 2 > config.text.context_length {
            return Err(Error::Config(format!(
                "prompts need {} tokens, text context holds {}",
                config.prefix_len + longest + 2,
                config.text.context_length
            )));
        }
        let n = schema.num_keypoints();
        let predictor = KeypointPredictor::new(
            &mut root.sub("keypoint_head"),
            config.encoder.channels() + n,
            n,
            config.deconv_channels,
            deconv_stages(config.encoder.stride())?,
        );
        let logit_scale = config
            .learn_logit_scale
            .then(|| root.add("adapt.logit_scale", Tensor::from_vec(&[1], alloc::vec![LEARNED_LOGIT_SCALE_INIT])));
        Ok(ClampModel {
            config,
            schema: schema.clone(),
            store,
            encoder,
            projector,
            text,
            template,
            refiner,
            predictor,
            logit_scale,
            weights: LossWeights::default(),
            decode: DecodeOptions::default(),
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.schema.num_keypoints()
    }

    /// Gaussian targets and loss mask on the heatmap grid.
    pub fn encode_targets(&self, keypoints: &[[f64; 2]], visibility: &[u8]) -> Result<SampleTarget> {
        let (heatmap, mask) = encode_gaussian(
            keypoints,
            visibility,
            self.config.heatmap_size(),
            HEATMAP_STRIDE as u32,
            self.config.sigma,
        )?;
        Ok(SampleTarget {
            keypoints: keypoints.to_vec(),
            visibility: visibility.to_vec(),
            heatmap,
            mask,
        })
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        if image.shape() != [3, h, w] {
            return Err(Error::shape("forward", format!("image {:?}, model expects [3, {h}, {w}]", image.shape())));
        }
        Ok(())
    }

    /// Origin prompt embeddings `[N, C_emb]`; the only path into the prefix.
    pub fn origin_prompts(&self, g: &mut Graph<'_>) -> Result<Var> {
        self.text.encode(g, &self.template)
    }

    /// Image-conditioned part of the forward pass, shared by training and
    /// inference. Returns raw features, projected features, enhanced
    /// prompts and score maps.
    fn image_path(&self, g: &mut Graph<'_>, image: Var, origin: Var) -> Result<(Var, Var, Var, Var)> {
        let enc = self.encoder.forward(g, image);
        let proj = self.projector.forward(g, enc);
        let cells = adapt::feature_tokens(g, proj.projected);
        let context = match proj.global {
            Some(global) => g.concat(&[global, cells]),
            None => cells,
        };
        let prompts = self.refiner.forward(g, origin, context);
        let scores = adapt::presence_scores_graph(g, proj.projected, prompts)?;
        Ok((enc.origin, proj.projected, prompts, scores))
    }

    fn logit_scale_var(&self, g: &mut Graph<'_>) -> LogitScale {
        match self.logit_scale {
            Some(id) => LogitScale::Learned(g.param(id)),
            None => LogitScale::Fixed(self.weights.logit_scale),
        }
    }

    /// Builds the training loss for one image on `g`, given the batch's
    /// origin prompt embeddings.
    pub fn forward_sample(
        &self,
        g: &mut Graph<'_>,
        image: Var,
        origin: Var,
        target: &SampleTarget,
    ) -> Result<SampleGraph> {
        let n = self.num_keypoints();
        if target.keypoints.len() != n || target.heatmap.channels() != n {
            return Err(Error::shape("forward_train", format!("targets for {} keypoints, model has {n}", target.keypoints.len())));
        }
        let (origin_features, projected, prompts, scores) = self.image_path(g, image, origin)?;
        let l_spatial = adapt::spatial_loss_graph(g, scores, &target.heatmap, &target.mask)?;
        let f_kp = adapt::sample_keypoint_features_graph(
            g,
            projected,
            &target.keypoints,
            &target.visibility,
            self.config.encoder.stride() as u32,
        );
        let scale = self.logit_scale_var(g);
        let matches = adapt::match_matrix_graph(g, f_kp, prompts, scale)?;
        let l_feature = adapt::feature_loss_graph(g, matches, &target.visibility);
        let fused = adapt::fuse_graph(g, origin_features, scores)?;
        let heatmap = self.predictor.forward(g, fused);
        if g.shape(heatmap)[1..] != [target.heatmap.height(), target.heatmap.width()] {
            return Err(Error::shape(
                "forward_train",
                format!("predicted {:?} vs target {}x{}", g.shape(heatmap), target.heatmap.height(), target.heatmap.width()),
            ));
        }
        let l_pred = g.masked_mse(heatmap, &target.heatmap.to_tensor(), &target.mask);
        let total = adapt::total_loss_graph(g, l_pred, l_spatial, l_feature, &self.weights);
        Ok(SampleGraph {
            l_pred,
            l_spatial,
            l_feature,
            total,
            heatmap,
            scores,
            matches,
        })
    }

    /// Loss components and intermediates for one image, without gradients.
    pub fn forward_train(&self, image: &Tensor, target: &SampleTarget) -> Result<TrainOutput> {
        self.check_image(image)?;
        let mut g = Graph::new(&self.store);
        let origin = self.origin_prompts(&mut g)?;
        let x = g.constant(image.clone());
        let out = self.forward_sample(&mut g, x, origin, target)?;
        let losses = LossComponents {
            l_pred: g.value(out.l_pred).item(),
            l_spatial: g.value(out.l_spatial).item(),
            l_feature: g.value(out.l_feature).item(),
            total: g.value(out.total).item(),
        };
        adapt::total_loss(losses.l_pred, losses.l_spatial, losses.l_feature, &self.weights)?;
        Ok(TrainOutput {
            losses,
            heatmap: HeatmapStack::from_tensor(g.value(out.heatmap).clone(), HEATMAP_STRIDE as u32)?,
            scores: HeatmapStack::from_tensor(g.value(out.scores).clone(), self.config.encoder.stride() as u32)?,
            matches: MatchMatrix {
                values: g.value(out.matches).clone(),
                logit_scale: self.current_logit_scale(),
            },
        })
    }

    pub fn current_logit_scale(&self) -> f64 {
        match self.logit_scale {
            Some(id) => self.store.value(id).item(),
            None => self.weights.logit_scale,
        }
    }

    /// Predicted keypoints for one image.
    pub fn forward_infer(&self, image: &Tensor) -> Result<Prediction> {
        let origin = crate::prompt::encode_prompts(&self.store, &self.text, &self.template)?;
        self.forward_infer_with(image, &origin.values)
    }

    /// As [`forward_infer`](Self::forward_infer) with precomputed origin
    /// prompt embeddings.
    pub fn forward_infer_with(&self, image: &Tensor, origin: &Tensor) -> Result<Prediction> {
        self.check_image(image)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(image.clone());
        let origin = g.constant(origin.clone());
        let (origin_features, _, _, scores) = self.image_path(&mut g, x, origin)?;
        let fused = adapt::fuse_graph(&mut g, origin_features, scores)?;
        let heatmap = self.predictor.forward(&mut g, fused);
        let heatmap = HeatmapStack::from_tensor(g.value(heatmap).clone(), HEATMAP_STRIDE as u32)?;
        let scores = HeatmapStack::from_tensor(g.value(scores).clone(), self.config.encoder.stride() as u32)?;
        let decoded = decode_with(&heatmap, self.decode);
        Ok(Prediction {
            coords: decoded.coords,
            confidence: decoded.scores,
            heatmap,
            scores,
        })
    }
}

/// Encoder followed directly by a predictor, with no prompt path.
pub fn forward_baseline(g: &mut Graph<'_>, encoder: &ImageEncoder, predictor: &KeypointPredictor, image: Var) -> Var {
    let enc = encoder.forward(g, image);
    predictor.forward(g, enc.origin)
}

/// The prompt-free baseline model.
#[derive(Clone, Debug)]
pub struct SimpleBaseline {
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub predictor: KeypointPredictor,
    pub input_size: (usize, usize),
}

impl SimpleBaseline {
    pub fn new(encoder: EncoderConfig, num_keypoints: usize, deconv_channels: usize, input_size: (usize, usize), seed: u64) -> Result<Self> {
        encoder::check_input(&encoder, input_size)?;
        let stages = deconv_stages(encoder.stride())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Scope::new(&mut store, &mut rng, "", ParamGroup::Head);
        let enc = ImageEncoder::new(&mut root.sub("visual"), &encoder);
        let predictor = KeypointPredictor::new(
            &mut root.sub("keypoint_head"),
            encoder.channels(),
            num_keypoints,
            deconv_channels,
            stages,
        );
        Ok(SimpleBaseline {
            store,
            encoder: enc,
            predictor,
            input_size,
        })
    }

    /// Shares every encoder and predictor weight with `model`; the
    /// predictor's first layer keeps only its input channels for the raw
    /// features.
    pub fn from_clamp(model: &ClampModel) -> Self {
        let mut store = model.store.clone();
        let mut predictor = model.predictor.clone();
        let c = model.config.encoder.channels();
        match predictor.stages.first_mut() {
            Some((deconv, _)) => {
                let w = store.value(deconv.weight);
                let row = w.len() / w.dim(0);
                let mut shape = w.shape().to_vec();
                shape[0] = c;
                let sliced = Tensor::from_vec(&shape, w.data()[..c * row].to_vec());
                deconv.weight = store.add("baseline.deconv0.weight", sliced, ParamGroup::Head);
            }
            None => {
                let w = store.value(predictor.final_layer.weight);
                let (n, cin) = (w.dim(0), w.dim(1));
                let data: Vec<f64> = (0..n).flat_map(|o| w.data()[o * cin..o * cin + c].to_vec()).collect();
                let sliced = Tensor::from_vec(&[n, c, 1, 1], data);
                predictor.final_layer.weight = store.add("baseline.final.weight", sliced, ParamGroup::Head);
            }
        }
        predictor.in_channels = c;
        SimpleBaseline {
            store,
            encoder: model.encoder.clone(),
            predictor,
            input_size: model.config.input_size,
        }
    }

    pub fn forward(&self, image: &Tensor) -> Result<HeatmapStack> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(image.clone());
        let h = forward_baseline(&mut g, &self.encoder, &self.predictor, x);
        HeatmapStack::from_tensor(g.value(h).clone(), HEATMAP_STRIDE as u32)
    }

    /// The baseline's only loss: masked heatmap MSE.
    pub fn loss(&self, image: &Tensor, target: &SampleTarget) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(image.clone());
        let h = forward_baseline(&mut g, &self.encoder, &self.predictor, x);
        if g.shape(h)[1..] != [target.heatmap.height(), target.heatmap.width()] {
            return Err(Error::shape("baseline", format!("predicted {:?}", g.shape(h))));
        }
        let l = g.masked_mse(h, &target.heatmap.to_tensor(), &target.mask);
        Ok(g.value(l).item())
    }
}

#[cfg(test)]
mod tests;

//! Training configuration, learning-rate schedule and the optimization step.
//!
//! One step embeds the origin prompts once, runs a separate graph per
//! sample, and routes the summed prompt gradients back through the text
//! encoder to the prefix vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::LossWeights;
use crate::augment::{crop_instance, Affine, AugmentConfig, Image, CLIP_MEAN, CLIP_STD};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math::derive_seed;
use crate::eval::PredictionRecord;
use crate::model::{ClampModel, LossComponents, Prediction, SampleTarget};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamId;
use crate::schema::InstanceRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Learning-rate multiplier for the image encoder.
    pub backbone_lr_mult: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (plus the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 210,
            lr: 5e-4,
            lr_decay_epochs: vec![170, 200],
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 128,
            backbone_lr_mult: 1.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    /// Supervised training with a ResNet-50 backbone.
    pub fn supervised_resnet() -> Self {
        Self::default()
    }

    /// Supervised training with a ViT-Base backbone.
    pub fn supervised_vit() -> Self {
        TrainConfig {
            backbone_lr_mult: 0.1,
            ..Self::default()
        }
    }

    /// Few-shot and zero-shot training with a ResNet-50 backbone.
    pub fn fewshot_resnet() -> Self {
        TrainConfig {
            batch_size: 64,
            ..Self::default()
        }
    }

    /// Few-shot and zero-shot training with a ViT-Base backbone.
    pub fn fewshot_vit() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 5e-5,
            backbone_lr_mult: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("backbone_lr_mult", self.backbone_lr_mult),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("lr_decay_epochs {:?} must be strictly increasing", self.lr_decay_epochs));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return fail(format!("lr_decay_epochs {:?} must be below epochs {}", self.lr_decay_epochs, self.epochs));
        }
        let (lo, hi) = self.augment.scale_range;
        if !(0.0 < lo && lo <= hi) || !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return fail(format!("invalid augmentation {:?}", self.augment));
        }
        self.loss_weights.validate()
    }

    /// Step schedule: `lr` times `lr_decay_factor` once per decay epoch
    /// already reached.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                epochs: self.epochs,
            });
        }
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok((0..drops).fold(self.lr, |lr, _| lr * self.lr_decay_factor))
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.batch_size)
    }
}

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &(epoch as u64).to_le_bytes()));
    order.shuffle(&mut rng);
    order
}

/// Augmentation seed for one record in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, record_id: u64) -> u64 {
    let mut key = [0u8; 16];
    key[..8].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[8..].copy_from_slice(&record_id.to_le_bytes());
    derive_seed(seed, &key)
}

/// Network input and targets for one record.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub record_id: u64,
    pub image: Tensor,
    pub target: SampleTarget,
    /// Source-image pixels to network-input pixels.
    pub transform: Affine,
}

pub fn prepare_sample(
    model: &ClampModel,
    record: &InstanceRecord,
    image: &Image,
    augment: &AugmentConfig,
) -> Result<PreparedSample> {
    let crop = crop_instance(record, image, &model.schema, model.config.input_size, augment)?;
    let target = model.encode_targets(&crop.keypoints, &crop.visibility)?;
    Ok(PreparedSample {
        record_id: record.id,
        image: crop.image.to_tensor(CLIP_MEAN, CLIP_STD),
        target,
        transform: crop.transform,
    })
}

/// Maps a prediction made on a crop back to source-image pixels.
pub fn to_source_record(instance_id: u64, pred: &Prediction, transform: &Affine) -> Result<PredictionRecord> {
    let inv = transform
        .inverse()
        .ok_or_else(|| Error::Config(format!("crop transform of instance {instance_id} is singular")))?;
    let keypoints = pred
        .coords
        .iter()
        .zip(&pred.confidence)
        .map(|(&p, &c)| {
            let [x, y] = inv.apply(p);
            [x, y, c]
        })
        .collect();
    Ok(PredictionRecord::new(instance_id, keypoints))
}

/// Optimizer plus step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub optimizer: AdamW,
    pub step: usize,
    pub backbone_lr_mult: f64,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Self {
        Trainer {
            optimizer: AdamW::new(config.adamw()),
            step: 0,
            backbone_lr_mult: config.backbone_lr_mult,
        }
    }

    /// One optimizer step on `batch`; returns batch-mean losses.
    /// A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self, model: &mut ClampModel, batch: &[PreparedSample], lr: f64) -> Result<LossComponents> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let inv = 1.0 / batch.len() as f64;
        let (grads, means) = {
            let store = &model.store;
            let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
            let add = |acc: &mut Vec<Option<Tensor>>, id: ParamId, g: Tensor| match &mut acc[id.index()] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            };
            let mut g0 = Graph::new(store);
            let origin = model.origin_prompts(&mut g0)?;
            let origin_value = g0.value(origin).clone();
            let mut origin_seed = Tensor::zeros(origin_value.shape());
            let mut means = LossComponents::default();
            for sample in batch {
                let mut g = Graph::new(store);
                let o = g.input(origin_value.clone());
                let x = g.constant(sample.image.clone());
                let out = model.forward_sample(&mut g, x, o, &sample.target)?;
                let total = g.value(out.total).item();
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss { step: self.step });
                }
                means.l_pred += inv * g.value(out.l_pred).item();
                means.l_spatial += inv * g.value(out.l_spatial).item();
                means.l_feature += inv * g.value(out.l_feature).item();
                means.total += inv * total;
                let grads = g.backward_with(out.total, Tensor::full(&[1], inv));
                if let Some(go) = grads.get(o) {
                    origin_seed.add_assign(go);
                }
                for (id, t) in grads.params(&g) {
                    add(&mut acc, id, t);
                }
            }
            for (id, t) in g0.backward_with(origin, origin_seed).params(&g0) {
                add(&mut acc, id, t);
            }
            let grads: Vec<(ParamId, Tensor)> = acc
                .into_iter()
                .enumerate()
                .filter_map(|(i, t)| t.map(|t| (ParamId(i), t)))
                .collect();
            (grads, means)
        };
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.optimizer.step(&mut model.store, &grads, lr, self.backbone_lr_mult);
        self.step += 1;
        Ok(means)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values_are_exact() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0).unwrap(), 5e-4);
        assert_eq!(c.lr_at(169).unwrap(), 5e-4);
        assert_eq!(c.lr_at(170).unwrap(), 5e-5);
        assert_eq!(c.lr_at(200).unwrap(), 5e-6);
        assert_eq!(c.lr_at(209).unwrap(), 5e-6);
        assert_eq!(c.lr_at(210), Err(Error::EpochOutOfRange { epoch: 210, epochs: 210 }));
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing() {
        let c = TrainConfig::default();
        let lrs: Vec<f64> = (0..c.epochs).map(|e| c.lr_at(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(lrs.windows(2).filter(|w| w[1] < w[0]).count(), c.lr_decay_epochs.len());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::fewshot_vit().validate().is_ok());
        assert_eq!(TrainConfig::fewshot_vit().lr, 5e-5);
        assert_eq!(TrainConfig::supervised_resnet().batch_size, 128);
        let bad = TrainConfig {
            lr_decay_epochs: vec![200, 170],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_epochs: vec![210],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shuffles_are_seeded() {
        assert_eq!(epoch_order(50, 3, 1), epoch_order(50, 3, 1));
        assert_ne!(epoch_order(50, 3, 1), epoch_order(50, 3, 2));
        let mut o = epoch_order(50, 3, 1);
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
        assert_ne!(sample_seed(1, 0, 5), sample_seed(1, 1, 5));
    }
}

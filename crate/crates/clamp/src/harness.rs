//! Training, prediction and evaluation over image files.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clamp_core::augment::{crop_with_draw, AugmentDraw, Image, CLIP_MEAN, CLIP_STD};
use clamp_core::eval::{evaluate, Evaluation, Metrics, PredictionRecord};
use clamp_core::model::ClampModel;
use clamp_core::prompt::encode_prompts;
use clamp_core::schema::{build_zeroshot_split, DatasetSplit, InstanceRecord};
use clamp_core::synthetic::BlobDataset;
use clamp_core::train::{epoch_order, prepare_sample, sample_seed, to_source_record, TrainConfig, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::coco::CocoDataset;
use crate::config::TokenizerSpec;
use crate::error::{Error, Result};
use crate::results::{write_metrics, write_oks_csv, write_predictions};

/// Source images for the records of a split.
pub trait ImageSource: Sync {
    fn image(&self, record: &InstanceRecord) -> Result<Image>;
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    Ok(Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()))
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    crate::error::write_atomic(path, &bytes)
}

impl ImageSource for CocoDataset {
    fn image(&self, record: &InstanceRecord) -> Result<Image> {
        let img = load_image(&self.image_path(record))?;
        if (img.width() as u32, img.height() as u32) != record.image_size {
            return Err(Error::Input(format!(
                "{}: image is {}x{}, annotation {} says {}x{}",
                self.image_path(record).display(),
                img.width(),
                img.height(),
                record.id,
                record.image_size.0,
                record.image_size.1
            )));
        }
        Ok(img)
    }
}

impl ImageSource for BlobDataset {
    fn image(&self, record: &InstanceRecord) -> Result<Image> {
        Ok(self.image_for(record).clone())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub epoch: usize,
    pub l_pred: f64,
    pub l_spatial: f64,
    pub l_feature: f64,
    pub total: f64,
    pub lr: f64,
}

/// A held-out split evaluated after every checkpoint.
pub struct Validation<'a> {
    pub split: &'a DatasetSplit,
    pub images: &'a dyn ImageSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    /// `(epoch, AP)` of the best validation result, saved as `best.ckpt`.
    pub best: Option<(usize, f64)>,
}

fn open_log(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. Writes `train_log.jsonl` and `checkpoints/`
/// under `output_dir`: `epoch_NNNN.ckpt` every `checkpoint_every` epochs,
/// `final.ckpt` at the end and `best.ckpt` when validating.
pub fn train(
    model: &mut ClampModel,
    tokenizer: &TokenizerSpec,
    split: &DatasetSplit,
    images: &dyn ImageSource,
    config: &TrainConfig,
    validation: Option<Validation<'_>>,
    output_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    if split.is_empty() {
        return Err(clamp_core::Error::EmptyDataset.into());
    }
    model.weights = config.loss_weights;
    let ckpt_dir = output_dir.join("checkpoints");
    let log_path = output_dir.join("train_log.jsonl");
    let mut log = open_log(&log_path)?;
    let mut trainer = Trainer::new(config);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch)?;
        let order = epoch_order(split.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .par_iter()
                .map(|&i| {
                    let r = &split.records[i];
                    let aug = config.augment.with_seed(sample_seed(config.seed, epoch, r.id));
                    Ok(prepare_sample(model, r, &images.image(r)?, &aug)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let l = trainer.train_step(model, &batch, lr)?;
            let line = LogLine {
                step: trainer.step - 1,
                epoch,
                l_pred: l.l_pred,
                l_spatial: l.l_spatial,
                l_feature: l.l_feature,
                total: l.total,
                lr,
            };
            let mut text = serde_json::to_string(&line).expect("log line serializes");
            text.push('\n');
            log.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        }
        let done = epoch + 1;
        let last = done == config.epochs;
        if last || done % config.checkpoint_every == 0 {
            let name = if last { "final.ckpt".to_string() } else { format!("epoch_{done:04}.ckpt") };
            checkpoint::save(&ckpt_dir.join(name), model, tokenizer, done, trainer.step)?;
            if let Some(v) = &validation {
                let ap = evaluate_split(model, v.split, v.images)?.metrics.ap;
                if best.is_none_or(|(_, b)| ap > b) {
                    best = Some((done, ap));
                    checkpoint::save(&ckpt_dir.join("best.ckpt"), model, tokenizer, done, trainer.step)?;
                }
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainSummary {
        final_checkpoint: ckpt_dir.join("final.ckpt"),
        log: log_path,
        steps: trainer.step,
        best,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    crate::error::read_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Predictions on unaugmented instance crops, in source-image pixels,
/// paired with their image ids.
pub fn predict(model: &ClampModel, split: &DatasetSplit, images: &dyn ImageSource) -> Result<Vec<(u64, PredictionRecord)>> {
    let origin = encode_prompts(&model.store, &model.text, &model.template)?;
    split
        .records
        .par_iter()
        .map(|r| {
            let img = images.image(r)?;
            let crop = crop_with_draw(r, &img, &model.schema, model.config.input_size, &AugmentDraw::NONE)?;
            let pred = model.forward_infer_with(&crop.image.to_tensor(CLIP_MEAN, CLIP_STD), &origin.values)?;
            Ok((r.image_id, to_source_record(r.id, &pred, &crop.transform)?))
        })
        .collect()
}

pub fn evaluate_split(model: &ClampModel, split: &DatasetSplit, images: &dyn ImageSource) -> Result<Evaluation> {
    let preds: Vec<PredictionRecord> = predict(model, split, images)?.into_iter().map(|(_, p)| p).collect();
    Ok(evaluate(&preds, &split.records, &split.schema.oks_sigmas)?)
}

/// Predicts and evaluates, writing `predictions.json`, `metrics.json` and
/// `per_instance_oks.csv` under `output_dir`.
pub fn evaluate_to_dir(model: &ClampModel, split: &DatasetSplit, images: &dyn ImageSource, output_dir: &Path) -> Result<Evaluation> {
    let preds = predict(model, split, images)?;
    write_predictions(&output_dir.join("predictions.json"), &preds)?;
    let records: Vec<PredictionRecord> = preds.into_iter().map(|(_, p)| p).collect();
    let e = evaluate(&records, &split.records, &split.schema.oks_sigmas)?;
    write_metrics(&output_dir.join("metrics.json"), &e)?;
    write_oks_csv(&output_dir.join("per_instance_oks.csv"), &e)?;
    Ok(e)
}

/// Trains a fresh model on `train_families` and evaluates it on the
/// disjoint `test_families`.
#[allow(clippy::too_many_arguments)]
pub fn run_zeroshot(
    make_model: impl FnOnce() -> Result<ClampModel>,
    tokenizer: &TokenizerSpec,
    full: &DatasetSplit,
    images: &dyn ImageSource,
    train_families: &BTreeSet<String>,
    test_families: &BTreeSet<String>,
    config: &TrainConfig,
    output_dir: &Path,
) -> Result<Metrics> {
    let (train_split, test_split) = build_zeroshot_split(full, train_families, test_families)?;
    let mut model = make_model()?;
    train(&mut model, tokenizer, &train_split, images, config, None, output_dir)?;
    Ok(evaluate_to_dir(&model, &test_split, images, output_dir)?.metrics)
}

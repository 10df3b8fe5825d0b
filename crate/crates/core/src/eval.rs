//! Object keypoint similarity and COCO-style AP/AR.
//!
//! Evaluation is top-down with ground-truth boxes: every instance gets at
//! most one prediction, so detections are matched to instances by id.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::InstanceRecord;

/// Lower bound of the medium area range, in px².
pub const AREA_MEDIUM_MIN: f64 = 32.0 * 32.0;
/// Upper bound of the medium range; larger instances are "large".
pub const AREA_MEDIUM_MAX: f64 = 96.0 * 96.0;
/// Recall points used for interpolated precision.
pub const RECALL_POINTS: usize = 101;

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: u64,
    /// `(x, y, confidence)` per keypoint, in source-image pixels.
    pub keypoints: Vec<[f64; 3]>,
    /// Ranking score.
    pub score: f64,
}

impl PredictionRecord {
    /// Scores the prediction by its mean keypoint confidence.
    pub fn new(instance_id: u64, keypoints: Vec<[f64; 3]>) -> Self {
        let score = if keypoints.is_empty() {
            0.0
        } else {
            keypoints.iter().map(|k| k[2]).sum::<f64>() / keypoints.len() as f64
        };
        PredictionRecord {
            instance_id,
            keypoints,
            score,
        }
    }
}

/// OKS of one prediction against its instance, averaged over labeled
/// keypoints with per-keypoint falloff `2 * sigmas[i]`.
pub fn compute_oks(pred: &PredictionRecord, gt: &InstanceRecord, sigmas: &[f64]) -> Result<f64> {
    let n = gt.keypoints.len();
    if pred.keypoints.len() != n || sigmas.len() != n {
        return Err(Error::KeypointArity {
            id: gt.id,
            expected: 3 * n,
            found: 3 * pred.keypoints.len(),
        });
    }
    if !(gt.area > 0.0) {
        return Err(Error::Record {
            id: gt.id,
            reason: format!("area {} is not positive", gt.area),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((kp, p), &sigma) in gt.keypoints.iter().zip(&pred.keypoints).zip(sigmas) {
        if !kp.labeled() {
            continue;
        }
        let (dx, dy) = (p[0] - kp.x, p[1] - kp.y);
        let k = 2.0 * sigma;
        sum += libm::exp(-(dx * dx + dy * dy) / (2.0 * gt.area * k * k));
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledKeypoints(gt.id));
    }
    Ok(sum / count as f64)
}

/// The six reported metrics. A metric over an empty area range is -1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub apm: f64,
    pub apl: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOks {
    pub instance_id: u64,
    pub area: f64,
    pub score: f64,
    /// `None` for instances without a prediction.
    pub oks: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// One entry per evaluated instance, in ground-truth order.
    pub per_instance: Vec<InstanceOks>,
    /// Instances excluded because they have no labeled keypoints.
    pub skipped: Vec<u64>,
}

/// Interpolated AP at one threshold for `(score, oks)` pairs against
/// `num_gt` instances, plus the recall reached.
fn ap_at(ranked: &[(f64, f64)], num_gt: usize, threshold: f64) -> (f64, f64) {
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(_, oks)) in ranked.iter().enumerate() {
        if oks >= threshold {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut area = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            area += precision[idx];
        }
    }
    (area / RECALL_POINTS as f64, recall.last().copied().unwrap_or(0.0))
}

/// AP and recall at each threshold of [`oks_thresholds`] for `(score, oks)`
/// pairs against `num_gt` instances. Ranking is by descending score and
/// stable, so ties keep input order.
pub fn ap_and_recall(scored: &[(f64, f64)], num_gt: usize) -> ([f64; 10], [f64; 10]) {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut ap = [0.0; 10];
    let mut rec = [0.0; 10];
    for (i, t) in oks_thresholds().into_iter().enumerate() {
        (ap[i], rec[i]) = ap_at(&ranked, num_gt, t);
    }
    (ap, rec)
}

fn summarize(entries: &[&InstanceOks]) -> Option<([f64; 10], [f64; 10])> {
    if entries.is_empty() {
        return None;
    }
    let scored: Vec<(f64, f64)> = entries.iter().filter_map(|e| e.oks.map(|o| (e.score, o))).collect();
    Some(ap_and_recall(&scored, entries.len()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores `preds` against `gts`. Instances without labeled keypoints are
/// skipped and reported; instances without a prediction count as misses.
pub fn evaluate(preds: &[PredictionRecord], gts: &[InstanceRecord], sigmas: &[f64]) -> Result<Evaluation> {
    let index: BTreeMap<u64, usize> = gts.iter().enumerate().map(|(i, g)| (g.id, i)).collect();
    let mut by_gt: Vec<Option<&PredictionRecord>> = alloc::vec![None; gts.len()];
    for p in preds {
        let &i = index.get(&p.instance_id).ok_or(Error::UnknownInstance(p.instance_id))?;
        if by_gt[i].replace(p).is_some() {
            return Err(Error::Record {
                id: p.instance_id,
                reason: "more than one prediction".into(),
            });
        }
    }
    let mut per_instance = Vec::with_capacity(gts.len());
    let mut skipped = Vec::new();
    for (gt, pred) in gts.iter().zip(by_gt) {
        if gt.num_labeled() == 0 {
            skipped.push(gt.id);
            continue;
        }
        let (oks, score) = match pred {
            Some(p) => (Some(compute_oks(p, gt, sigmas)?), p.score),
            None => (None, f64::NEG_INFINITY),
        };
        per_instance.push(InstanceOks {
            instance_id: gt.id,
            area: gt.area,
            score,
            oks,
        });
    }
    let all: Vec<&InstanceOks> = per_instance.iter().collect();
    let (ap, rec) = summarize(&all).ok_or(Error::EmptyDataset)?;
    let medium: Vec<&InstanceOks> = per_instance
        .iter()
        .filter(|e| (AREA_MEDIUM_MIN..=AREA_MEDIUM_MAX).contains(&e.area))
        .collect();
    let large: Vec<&InstanceOks> = per_instance.iter().filter(|e| e.area > AREA_MEDIUM_MAX).collect();
    let metrics = Metrics {
        ap: mean(&ap),
        ap50: ap[0],
        ap75: ap[5],
        apm: summarize(&medium).map_or(-1.0, |(a, _)| mean(&a)),
        apl: summarize(&large).map_or(-1.0, |(a, _)| mean(&a)),
        ar: mean(&rec),
    };
    Ok(Evaluation {
        metrics,
        per_instance,
        skipped,
    })
}

/// Ids present in `gts` but absent from `preds`.
pub fn missing_predictions(preds: &[PredictionRecord], gts: &[InstanceRecord]) -> Vec<u64> {
    let have: BTreeSet<u64> = preds.iter().map(|p| p.instance_id).collect();
    gts.iter().map(|g| g.id).filter(|id| !have.contains(id)).collect()
}

#[cfg(test)]
mod tests;

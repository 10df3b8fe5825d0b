//! COCO-results-style prediction files and metric outputs.

use std::fmt::Write as _;
use std::path::Path;

use clamp_core::eval::{Evaluation, PredictionRecord};
use serde::{Deserialize, Serialize};

use crate::error::{read_string, write_atomic, Error, Result};

/// One entry of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    /// Annotation id of the ground-truth instance the box came from.
    pub instance_id: u64,
    pub image_id: u64,
    /// Flat `[x1, y1, c1, ...]`.
    pub keypoints: Vec<f64>,
    pub score: f64,
}

pub fn write_predictions(path: &Path, preds: &[(u64, PredictionRecord)]) -> Result<()> {
    let entries: Vec<ResultEntry> = preds
        .iter()
        .map(|(image_id, p)| ResultEntry {
            instance_id: p.instance_id,
            image_id: *image_id,
            keypoints: p.keypoints.iter().flatten().copied().collect(),
            score: p.score,
        })
        .collect();
    write_atomic(path, &serde_json::to_vec(&entries).expect("results serialize"))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let entries: Vec<ResultEntry> =
        serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    entries
        .into_iter()
        .map(|e| {
            if e.keypoints.len() % 3 != 0 {
                return Err(Error::format(path, format!("instance {}: keypoints length {} is not a multiple of 3", e.instance_id, e.keypoints.len())));
            }
            Ok(PredictionRecord {
                instance_id: e.instance_id,
                keypoints: e.keypoints.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                score: e.score,
            })
        })
        .collect()
}

/// The six metrics as a JSON object.
pub fn write_metrics(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&eval.metrics).expect("metrics serialize");
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

/// `instance_id,area,score,oks`; instances without a prediction have an
/// empty OKS field.
pub fn write_oks_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut out = String::from("instance_id,area,score,oks\n");
    for r in &eval.per_instance {
        let oks = r.oks.map(|o| o.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.instance_id, r.area, r.score, oks).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

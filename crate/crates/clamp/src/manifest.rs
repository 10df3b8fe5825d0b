//! Split manifests: JSON arrays of annotation ids, plus a summary.

use std::collections::BTreeMap;
use std::path::Path;

use clamp_core::schema::DatasetSplit;
use serde::{Deserialize, Serialize};

use crate::error::{read_string, write_atomic, Error, Result};

pub fn write_ids(path: &Path, ids: &[u64]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(ids).expect("ids serialize");
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

pub fn read_ids(path: &Path) -> Result<Vec<u64>> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, format!("expected a JSON list of annotation ids: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub records: usize,
    pub species_counts: BTreeMap<String, usize>,
    pub families: Vec<String>,
}

impl SplitSummary {
    pub fn of(name: &str, split: &DatasetSplit) -> Self {
        SplitSummary {
            name: name.to_string(),
            records: split.len(),
            species_counts: split.species_counts(),
            families: split.families().into_iter().collect(),
        }
    }
}

pub fn write_summary(path: &Path, summaries: &[SplitSummary]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

//! Run configuration: a TOML file plus dotted `key=value` overrides.
//!
//! Unknown keys are errors, both in the file and in overrides. Relative
//! paths resolve against the directory of the configuration file.

use std::path::{Path, PathBuf};

use clamp_core::model::ModelConfig;
use clamp_core::prompt::{Tokenizer, WordVocab};
use clamp_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::bpe::{BpeTokenizer, CLIP_MERGES};
use crate::coco::SchemaChoice;
use crate::error::{read_string, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// COCO keypoint file used for training and split preparation.
    pub annotations: Option<PathBuf>,
    /// Image directory; defaults to the annotation file's directory.
    pub images: Option<PathBuf>,
    pub schema: SchemaChoice,
    /// Manifest restricting the training records.
    pub train_ids: Option<PathBuf>,
    /// Evaluation annotations; defaults to `annotations`.
    pub eval_annotations: Option<PathBuf>,
    pub eval_images: Option<PathBuf>,
    /// Manifest restricting the evaluation records.
    pub eval_ids: Option<PathBuf>,
    /// Manifest of a validation subset of `annotations`, evaluated after
    /// every checkpoint to track the best one.
    pub val_ids: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TokenizerSpec {
    /// Whole words; `None` means the built-in anatomy vocabulary.
    Words {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        words: Option<Vec<String>>,
    },
    /// CLIP byte-level BPE from a merges file (`.txt` or `.txt.gz`).
    Bpe {
        path: PathBuf,
        #[serde(default = "clip_merges")]
        max_merges: usize,
    },
}

fn clip_merges() -> usize {
    CLIP_MERGES
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec::Words { words: None }
    }
}

impl TokenizerSpec {
    pub fn build(&self) -> Result<Box<dyn Tokenizer + Send + Sync>> {
        Ok(match self {
            TokenizerSpec::Words { words: None } => Box::new(WordVocab::anatomy()),
            TokenizerSpec::Words { words: Some(w) } => Box::new(WordVocab::from_words(w.iter().map(String::as_str))),
            TokenizerSpec::Bpe { path, max_merges } => Box::new(BpeTokenizer::from_file(path, *max_merges)?),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    /// Pretrained CLIP weights in safetensors format.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer: TokenizerSpec,
    pub clip: ClipConfig,
    /// Whether the file or an override set anything under `model`.
    #[serde(skip)]
    pub model_given: bool,
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "tokenizer", "clip"];

impl RunConfig {
    /// Parses `text`; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let model_given = table.contains_key("model");
        let mut cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // Every key given must survive a round trip; anything dropped was
        // not a field.
        let parsed = toml::Value::try_from(&cfg).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&table, parsed.as_table().expect("config is a table"), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.model_given = model_given;
        cfg.resolve_paths(base);
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::parse(&read_string(p)?, &base, overrides)
            }
            None => Self::parse("", &std::env::current_dir().unwrap_or_default(), overrides),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.annotations,
            &mut d.images,
            &mut d.train_ids,
            &mut d.eval_annotations,
            &mut d.eval_images,
            &mut d.eval_ids,
            &mut d.val_ids,
            &mut self.clip.weights,
        ] {
            fix(p);
        }
        if let TokenizerSpec::Bpe { path, .. } = &mut self.tokenizer {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn annotations(&self) -> Result<&Path> {
        self.data
            .annotations
            .as_deref()
            .ok_or_else(|| Error::Config("data.annotations is not set".into()))
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &format!("{path}."), out),
            _ => {}
        }
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Keys outside the top-level sections are looked up in `train`, then
/// `model`, so `loss_weights.alpha1=0.5` and `epochs=2` work unqualified.
fn qualify(key: &str) -> String {
    let head = key.split('.').next().unwrap_or_default();
    if SECTIONS.contains(&head) {
        return key.to_string();
    }
    let has = |v: toml::Value| v.as_table().is_some_and(|t| t.contains_key(head));
    if has(toml::Value::try_from(TrainConfig::default()).expect("train config serializes")) {
        format!("train.{key}")
    } else if has(toml::Value::try_from(ModelConfig::default()).expect("model config serializes")) {
        format!("model.{key}")
    } else {
        key.to_string()
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = qualify(key.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    // Missing tables start from their defaults so a single field of a
    // tagged variant can be overridden.
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut def = defaults.as_table();
    let mut cur = table;
    for p in path {
        let seed = def.and_then(|d| d.get(*p)).and_then(toml::Value::as_table);
        def = seed;
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(seed.cloned().unwrap_or_default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `CLAMPCKP`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor listed
//! in the header as little-endian `f64` values in header order.

use std::path::Path;

use clamp_core::model::{ClampModel, ModelConfig};
use clamp_core::schema::KeypointSchema;
use clamp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TokenizerSpec;
use crate::error::{read, write_atomic, Error, Result};

pub const MAGIC: &[u8; 8] = b"CLAMPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub schema: KeypointSchema,
    pub tokenizer: TokenizerSpec,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub header: Header,
    pub model: ClampModel,
}

pub fn save(path: &Path, model: &ClampModel, tokenizer: &TokenizerSpec, epoch: usize, step: usize) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        schema: model.schema.clone(),
        tokenizer: tokenizer.clone(),
        epoch,
        step,
        tensors: model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values: usize = model.store.iter().map(|(_, p)| p.value.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("checkpoint format {version}, this build reads {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok((header, end))
}

/// Rebuilds the model the checkpoint was written from.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    let (header, mut offset) = read_header(&bytes, path)?;
    let tokenizer = header.tokenizer.build()?;
    let mut model = ClampModel::new(header.model.clone(), &header.schema, tokenizer.as_ref())?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {} tensors, its model config builds {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = offset + 8 * n;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| Error::format(path, format!("truncated data at tensor {}", t.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set(&t.name, Tensor::from_vec(&t.shape, data))?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint { header, model })
}

/// Checks that a checkpoint fits a dataset schema and a configured
/// embedding width.
pub fn check_compatible(model: &ClampModel, schema: &KeypointSchema, embed_dim: usize) -> Result<()> {
    if model.num_keypoints() != schema.num_keypoints() {
        return Err(Error::Mismatch(format!(
            "checkpoint predicts {} keypoints, dataset schema {} has {}",
            model.num_keypoints(),
            schema.name,
            schema.num_keypoints()
        )));
    }
    let have = model.config.encoder.embed_dim();
    if have != embed_dim {
        return Err(Error::Mismatch(format!("checkpoint embedding width {have}, configuration asks for {embed_dim}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clamp_core::prompt::WordVocab;
    use clamp_core::synthetic::blob_schema;

    fn model(seed: u64) -> ClampModel {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        ClampModel::new(cfg, &blob_schema(), &WordVocab::anatomy()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let m = model(7);
        save(&path, &m, &TokenizerSpec::default(), 3, 12).unwrap();
        let back = load(&path).unwrap();
        assert_eq!((back.header.epoch, back.header.step), (3, 12));
        for ((_, a), (_, b)) in m.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &model(0), &TokenizerSpec::default(), 0, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn compatibility() {
        let m = model(0);
        assert!(check_compatible(&m, &blob_schema(), 32).is_ok());
        assert_eq!(check_compatible(&m, &KeypointSchema::ap10k(), 32).unwrap_err().exit_code(), 3);
        assert_eq!(check_compatible(&m, &blob_schema(), 64).unwrap_err().exit_code(), 3);
    }
}

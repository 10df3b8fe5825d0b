//! Loads released CLIP weights (safetensors) into a model.
//!
//! Parameter names already follow CLIP's; the only structural difference is
//! that fused attention projections (`in_proj_weight`, `in_proj_bias`) are
//! split into separate query, key and value projections here.

use std::collections::BTreeMap;
use std::path::Path;

use clamp_core::model::ClampModel;
use clamp_core::Tensor;
use serde::Deserialize;

use crate::error::{read, Error, Result};

#[derive(Debug, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Tensors from a safetensors file, widened to `f64`.
pub fn read_safetensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = read(path)?;
    let fmt = |msg: String| Error::format(path, msg);
    let n = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| fmt("shorter than its header length".into()))?;
    let header_end = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated header".into()))?;
    let mut header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| fmt(format!("header: {e}")))?;
    header.remove("__metadata__");
    let data = &bytes[header_end..];
    let mut out = BTreeMap::new();
    for (name, value) in header {
        let e: Entry = serde_json::from_value(value).map_err(|e| fmt(format!("{name}: {e}")))?;
        let [lo, hi] = e.data_offsets;
        let raw = data.get(lo..hi).filter(|_| lo <= hi).ok_or_else(|| fmt(format!("{name}: offsets outside the data")))?;
        let count: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "F64" => 8,
            "F32" => 4,
            "F16" | "BF16" => 2,
            "I64" => 8,
            other => return Err(fmt(format!("{name}: unsupported dtype {other}"))),
        };
        if raw.len() != count * width {
            return Err(fmt(format!("{name}: {} bytes for shape {:?}", raw.len(), e.shape)));
        }
        let values: Vec<f64> = match e.dtype.as_str() {
            "F64" => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            "F32" => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            "F16" => raw.chunks_exact(2).map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]]))).collect(),
            "BF16" => raw
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
            _ => raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8")) as f64).collect(),
        };
        out.insert(name, Tensor::from_vec(&e.shape, values));
    }
    Ok(out)
}

fn f16_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f64;
    sign * match exp {
        0 => frac * 2f64.powi(-24),
        31 if frac == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

/// Names CLIP checkpoints carry that have no counterpart here.
fn ignored(name: &str) -> bool {
    name.ends_with("num_batches_tracked") || name == "logit_scale" || name == "input_resolution" || name == "context_length" || name == "vocab_size"
}

/// What [`load_clip`] matched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model tensors the file did not provide.
    pub missing: Vec<String>,
    /// File tensors with no model counterpart.
    pub unused: Vec<String>,
}

/// Splits fused attention projections into `q_proj`, `k_proj`, `v_proj`.
fn expand(tensors: BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, t) in tensors {
        let (prefix, suffix) = match name.rsplit_once('.') {
            Some((p, "in_proj_weight")) => (p.to_string(), "weight"),
            Some((p, "in_proj_bias")) => (p.to_string(), "bias"),
            _ => {
                out.insert(name, t);
                continue;
            }
        };
        let rows = t.dim(0);
        if rows % 3 != 0 {
            return Err(Error::Input(format!("{name}: {rows} rows do not split into three projections")));
        }
        let per = t.len() / 3;
        let mut shape = t.shape().to_vec();
        shape[0] = rows / 3;
        for (i, part) in ["q_proj", "k_proj", "v_proj"].iter().enumerate() {
            let data = t.data()[i * per..(i + 1) * per].to_vec();
            out.insert(format!("{prefix}.{part}.{suffix}"), Tensor::from_vec(&shape, data));
        }
    }
    Ok(out)
}

/// Copies every matching tensor into `model`. Shape disagreements are
/// errors; missing and unused names are reported.
pub fn load_clip(model: &mut ClampModel, path: &Path) -> Result<LoadReport> {
    let tensors = expand(read_safetensors(path)?)?;
    let mut report = LoadReport::default();
    for (name, t) in &tensors {
        if ignored(name) {
            continue;
        }
        if model.store.lookup(name).is_some() {
            model.store.set(name, t.clone()).map_err(|e| Error::Mismatch(format!("{}: {e}", path.display())))?;
            report.loaded += 1;
        } else {
            report.unused.push(name.clone());
        }
    }
    report.missing = model
        .store
        .iter()
        .map(|(_, p)| &p.name)
        .filter(|n| !tensors.contains_key(*n) && is_pretrained(n))
        .cloned()
        .collect();
    Ok(report)
}

/// Parameters CLIP provides: everything except the prompt, adaptation and
/// keypoint-head components, which are trained here.
fn is_pretrained(name: &str) -> bool {
    !(name.starts_with("prompt.") || name.starts_with("adapt.") || name.starts_with("keypoint_head."))
}

/// Writes `F32` safetensors; used to produce fixtures.
pub fn write_safetensors_f32(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut header = serde_json::Map::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        let lo = data.len();
        for v in t.data() {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        header.insert(
            name.clone(),
            serde_json::json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [lo, data.len()]}),
        );
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    crate::error::write_atomic(path, &out)
}

//! Prompt-to-image adaptation: presence score maps, the spatial and feature
//! contrastive losses, score-map fusion and the combined objective.
//!
//! Every operation exists twice: as a graph builder (`*_graph`) used during
//! training, and as a plain function over values that runs a throwaway
//! graph.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heatmap::HeatmapStack;
use crate::params::ParamStore;
use crate::prompt::PromptEmbedding;
use crate::tensor::Tensor;

/// Image features in the shared embedding space, stored `[C_emb, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeature {
    pub values: Tensor,
    /// Input pixels per feature cell.
    pub source_stride: u32,
}

/// `[N, N]` scaled cosine similarities; rows index sampled keypoint
/// features, columns index prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMatrix {
    pub values: Tensor,
    pub logit_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub logit_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 1.0,
            logit_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha1.is_finite()
            && self.alpha2.is_finite()
            && self.logit_scale.is_finite()
            && self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
            && self.logit_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Multiplier on the cosine matrix: a constant, or a learned scalar node.
#[derive(Clone, Copy, Debug)]
pub enum LogitScale {
    Fixed(f64),
    Learned(Var),
}

/// `F [C, H, W]` as cell rows `[H*W, C]`.
pub fn feature_tokens(g: &mut Graph<'_>, f: Var) -> Var {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

fn check_width(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("feature width {a} vs prompt width {b}")));
    }
    Ok(())
}

/// Cosine similarity of every feature cell with every prompt:
/// `F [C, H, W]`, `E [N, C]` to `S [N, H, W]`.
pub fn presence_scores_graph(g: &mut Graph<'_>, f: Var, e: Var) -> Result<Var> {
    let fs = g.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("presence_scores", format!("feature shape {fs:?}")));
    }
    check_width("presence_scores", fs[0], g.shape(e)[1])?;
    let tokens = feature_tokens(g, f);
    let f_hat = g.l2_normalize_rows(tokens);
    let e_hat = g.l2_normalize_rows(e);
    let s = g.matmul_t(e_hat, f_hat);
    let n = g.shape(e)[0];
    Ok(g.reshape(s, &[n, fs[1], fs[2]]))
}

/// Masked MSE between `S` resized to the target grid and the target.
pub fn spatial_loss_graph(g: &mut Graph<'_>, s: Var, target: &HeatmapStack, mask: &[bool]) -> Result<Var> {
    let ss = g.shape(s).to_vec();
    let (th, tw) = (target.height(), target.width());
    if ss[0] != target.channels() || mask.len() != ss[0] {
        return Err(Error::shape(
            "spatial_loss",
            format!("{} score channels, {} targets, {} mask entries", ss[0], target.channels(), mask.len()),
        ));
    }
    if th < ss[1] || tw < ss[2] {
        return Err(Error::Downsample {
            from_h: ss[1],
            from_w: ss[2],
            to_h: th,
            to_w: tw,
        });
    }
    let up = if (ss[1], ss[2]) == (th, tw) {
        s
    } else {
        g.resize_bilinear(s, th, tw)
    };
    Ok(g.masked_mse(up, &target.to_tensor(), mask))
}

/// Continuous feature-grid position of an input pixel coordinate.
pub fn pixel_to_grid(x: f64, stride: f64) -> f64 {
    (x + 0.5) / stride - 0.5
}

/// Bilinearly samples `F` at each labeled keypoint; unlabeled rows are zero.
pub fn sample_keypoint_features_graph(
    g: &mut Graph<'_>,
    f: Var,
    keypoints: &[[f64; 2]],
    visibility: &[u8],
    stride: u32,
) -> Var {
    assert_eq!(keypoints.len(), visibility.len());
    let s = stride as f64;
    let points: Vec<Option<[f64; 2]>> = keypoints
        .iter()
        .zip(visibility)
        .map(|(p, &v)| (v > 0).then(|| [pixel_to_grid(p[0], s), pixel_to_grid(p[1], s)]))
        .collect();
    g.sample_points(f, &points)
}

/// `scale * normalize(F_kp) normalize(E)^T`.
pub fn match_matrix_graph(g: &mut Graph<'_>, f_kp: Var, e: Var, scale: LogitScale) -> Result<Var> {
    check_width("match_matrix", g.shape(f_kp)[1], g.shape(e)[1])?;
    let f_hat = g.l2_normalize_rows(f_kp);
    let e_hat = g.l2_normalize_rows(e);
    let m = g.matmul_t(f_hat, e_hat);
    Ok(match scale {
        LogitScale::Fixed(s) if s == 1.0 => m,
        LogitScale::Fixed(s) => g.scale(m, s),
        LogitScale::Learned(v) => g.scale_by(m, v),
    })
}

/// Symmetric cross-entropy against the diagonal over labeled keypoints.
pub fn feature_loss_graph(g: &mut Graph<'_>, m: Var, visibility: &[u8]) -> Var {
    let mask: Vec<bool> = visibility.iter().map(|&v| v > 0).collect();
    g.diag_contrastive(m, &mask)
}

/// Channel concatenation `[C, H, W] ++ [N, H, W]`.
pub fn fuse_graph(g: &mut Graph<'_>, f_origin: Var, s: Var) -> Result<Var> {
    let (a, b) = (g.shape(f_origin).to_vec(), g.shape(s).to_vec());
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::shape("fuse", format!("features {a:?} vs score maps {b:?}")));
    }
    Ok(g.concat(&[f_origin, s]))
}

/// `l_pred + alpha1 * l_spatial + alpha2 * l_feature`.
pub fn total_loss_graph(g: &mut Graph<'_>, l_pred: Var, l_spatial: Var, l_feature: Var, w: &LossWeights) -> Var {
    g.weighted_sum(&[(l_pred, 1.0), (l_spatial, w.alpha1), (l_feature, w.alpha2)])
}

fn scratch<R>(f: impl FnOnce(&mut Graph<'_>) -> Result<R>) -> Result<R> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    f(&mut g)
}

pub fn presence_scores(f: &ProjectedFeature, e: &PromptEmbedding) -> Result<HeatmapStack> {
    let t = scratch(|g| {
        let (fv, ev) = (g.constant(f.values.clone()), g.constant(e.values.clone()));
        let s = presence_scores_graph(g, fv, ev)?;
        Ok(g.value(s).clone())
    })?;
    HeatmapStack::from_tensor(t, f.source_stride)
}

/// The score maps are upsampled to the target grid first.
pub fn spatial_loss(s: &HeatmapStack, target: &HeatmapStack, mask: &[bool]) -> Result<f64> {
    scratch(|g| {
        let sv = g.constant(s.to_tensor());
        let l = spatial_loss_graph(g, sv, target, mask)?;
        Ok(g.value(l).item())
    })
}

pub fn sample_keypoint_features(f: &ProjectedFeature, keypoints: &[[f64; 2]], visibility: &[u8]) -> Tensor {
    scratch(|g| {
        let fv = g.constant(f.values.clone());
        let out = sample_keypoint_features_graph(g, fv, keypoints, visibility, f.source_stride);
        Ok(g.value(out).clone())
    })
    .expect("sampling has no failure mode")
}

pub fn match_matrix(f_kp: &Tensor, e: &PromptEmbedding, logit_scale: f64) -> Result<MatchMatrix> {
    let values = scratch(|g| {
        let (fv, ev) = (g.constant(f_kp.clone()), g.constant(e.values.clone()));
        let m = match_matrix_graph(g, fv, ev, LogitScale::Fixed(logit_scale))?;
        Ok(g.value(m).clone())
    })?;
    Ok(MatchMatrix { values, logit_scale })
}

pub fn feature_loss(m: &MatchMatrix, visibility: &[u8]) -> f64 {
    scratch(|g| {
        let mv = g.constant(m.values.clone());
        let l = feature_loss_graph(g, mv, visibility);
        Ok(g.value(l).item())
    })
    .expect("feature loss has no failure mode")
}

pub fn fuse(f_origin: &Tensor, s: &HeatmapStack) -> Result<Tensor> {
    scratch(|g| {
        let (fv, sv) = (g.constant(f_origin.clone()), g.constant(s.to_tensor()));
        let out = fuse_graph(g, fv, sv)?;
        Ok(g.value(out).clone())
    })
}

/// Fails on any non-finite component.
pub fn total_loss(l_pred: f64, l_spatial: f64, l_feature: f64, w: &LossWeights) -> Result<f64> {
    for (v, name) in [(l_pred, "l_pred"), (l_spatial, "l_spatial"), (l_feature, "l_feature")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(l_pred + w.alpha1 * l_spatial + w.alpha2 * l_feature)
}

//! Gaussian heatmap targets, argmax decoding and map resampling.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::resize_values;
use crate::tensor::Tensor;

/// Default Gaussian width at stride-4 resolution.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Stack of `N` spatial maps. Stored channel-major: value `(i, j, n)` lives
/// at `data[(n * height + i) * width + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    stride: u32,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: u32) -> Self {
        assert!(channels >= 1 && height >= 1 && width >= 1 && stride >= 1);
        HeatmapStack {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Wraps a `[channels, height, width]` tensor.
    pub fn from_tensor(t: Tensor, stride: u32) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s.contains(&0) || stride == 0 {
            return Err(Error::shape("HeatmapStack::from_tensor", alloc::format!("{s:?}, stride {stride}")));
        }
        let (channels, height, width) = (s[0], s[1], s[2]);
        Ok(HeatmapStack {
            channels,
            height,
            width,
            stride,
            data: t.into_data(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize, n: usize) -> f64 {
        self.data[(n * self.height + i) * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, n: usize, v: f64) {
        self.data[(n * self.height + i) * self.width + j] = v;
    }

    pub fn channel(&self, n: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[n * hw..(n + 1) * hw]
    }

    pub fn channel_mut(&mut self, n: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.data[n * hw..(n + 1) * hw]
    }
}

/// Renders one Gaussian per visible keypoint.
///
/// Keypoints are in input pixels; the peak cell is `round(p / stride)`.
/// Values farther than `3 sigma` from the peak are zero. Returns the stack and
/// the per-keypoint loss mask (`visibility > 0` and the peak lands inside the
/// map).
pub fn encode_gaussian(
    keypoints: &[[f64; 2]],
    visibility: &[u8],
    map_size: (usize, usize),
    stride: u32,
    sigma: f64,
) -> Result<(HeatmapStack, Vec<bool>)> {
    if keypoints.len() != visibility.len() {
        return Err(Error::shape(
            "encode_gaussian",
            alloc::format!("{} keypoints vs {} visibility flags", keypoints.len(), visibility.len()),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(alloc::format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = map_size;
    let mut maps = HeatmapStack::zeros(keypoints.len().max(1), h, w, stride);
    let mut mask = vec![false; keypoints.len()];
    let radius = 3.0 * sigma;
    let r = libm::ceil(radius) as i64;
    let s = stride as f64;
    for (n, (&[x, y], &v)) in keypoints.iter().zip(visibility).enumerate() {
        if v == 0 {
            continue;
        }
        let cx = libm::round(x / s);
        let cy = libm::round(y / s);
        if !(cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64) {
            continue;
        }
        mask[n] = true;
        let (cx, cy) = (cx as i64, cy as i64);
        for i in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for j in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let d2 = ((i - cy) * (i - cy) + (j - cx) * (j - cx)) as f64;
                if d2 <= radius * radius {
                    maps.set(i as usize, j as usize, n, libm::exp(-d2 / (2.0 * sigma * sigma)));
                }
            }
        }
    }
    Ok((maps, mask))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Shift the argmax a quarter cell towards the higher neighbour.
    pub quarter_offset: bool,
}

/// Keypoint locations in input pixels plus the peak value per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub coords: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
}

/// Plain per-channel argmax scaled by the stride. Ties resolve to the first
/// cell in row-major order.
pub fn decode_argmax(heatmap: &HeatmapStack) -> Vec<[f64; 2]> {
    decode_with(heatmap, DecodeOptions::default()).coords
}

pub fn decode_with(heatmap: &HeatmapStack, opts: DecodeOptions) -> Decoded {
    let (h, w) = (heatmap.height, heatmap.width);
    let s = heatmap.stride as f64;
    let mut coords = Vec::with_capacity(heatmap.channels);
    let mut scores = Vec::with_capacity(heatmap.channels);
    for n in 0..heatmap.channels {
        let ch = heatmap.channel(n);
        let mut best = 0;
        for (idx, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = idx;
            }
        }
        let (i, j) = (best / w, best % w);
        let (mut fx, mut fy) = (j as f64, i as f64);
        if opts.quarter_offset {
            if j > 0 && j + 1 < w {
                fx += 0.25 * sign(ch[i * w + j + 1] - ch[i * w + j - 1]);
            }
            if i > 0 && i + 1 < h {
                fy += 0.25 * sign(ch[(i + 1) * w + j] - ch[(i - 1) * w + j]);
            }
        }
        coords.push([s * fx, s * fy]);
        scores.push(ch[best]);
    }
    Decoded { coords, scores }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Bilinear upsampling with pixel-center alignment. The output stride is the
/// input stride scaled by the height ratio (integer, at least 1).
pub fn upsample_map(map: &HeatmapStack, target: (usize, usize)) -> Result<HeatmapStack> {
    let (th, tw) = target;
    if th < map.height || tw < map.width {
        return Err(Error::Downsample {
            from_h: map.height,
            from_w: map.width,
            to_h: th,
            to_w: tw,
        });
    }
    let out = resize_values(&map.to_tensor(), th, tw);
    let stride = ((map.stride as usize * map.height) / th).max(1) as u32;
    HeatmapStack::from_tensor(out, stride)
}

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Conv2d, Deconv, Scope};
use crate::params::ParamGroup;

/// Output stride of every predicted heatmap.
pub const HEATMAP_STRIDE: usize = 4;

/// Deconvolution head: `stages` x (4x4 stride-2 transposed conv, batch norm,
/// ReLU), then a 1x1 convolution to one channel per keypoint.
#[derive(Clone, Debug)]
pub struct KeypointPredictor {
    pub in_channels: usize,
    pub num_keypoints: usize,
    pub stages: Vec<(Deconv, BatchNorm)>,
    pub final_layer: Conv2d,
}

/// Number of 2x upsampling stages from feature stride `s0` to stride 4.
pub fn deconv_stages(s0: usize) -> Result<usize> {
    if s0 < HEATMAP_STRIDE || s0 % HEATMAP_STRIDE != 0 || !(s0 / HEATMAP_STRIDE).is_power_of_two() {
        return Err(Error::Config(format!(
            "feature stride {s0} is not a power-of-two multiple of {HEATMAP_STRIDE}"
        )));
    }
    Ok((s0 / HEATMAP_STRIDE).trailing_zeros() as usize)
}

impl KeypointPredictor {
    pub fn new<R: Rng + ?Sized>(
        s: &mut Scope<'_, R>,
        in_channels: usize,
        num_keypoints: usize,
        channels: usize,
        stages: usize,
    ) -> Self {
        let mut s = s.with_group(ParamGroup::Head);
        let mut c = in_channels;
        let stages = (0..stages)
            .map(|i| {
                let d = Deconv::new(&mut s.sub(&format!("deconv{i}")), c, channels);
                let bn = BatchNorm::new(&mut s.sub(&format!("bn{i}")), channels);
                c = channels;
                (d, bn)
            })
            .collect();
        let final_layer = Conv2d::new(&mut s.sub("final"), c, num_keypoints, 1, 1, 0, true);
        KeypointPredictor {
            in_channels,
            num_keypoints,
            stages,
            final_layer,
        }
    }

    /// `[in_channels, H, W]` to heatmaps `[N, H * 2^stages, W * 2^stages]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        debug_assert_eq!(g.shape(x)[0], self.in_channels);
        let mut x = x;
        for (deconv, bn) in &self.stages {
            let y = deconv.forward(g, x);
            let y = bn.forward(g, y);
            x = g.relu(y);
        }
        self.final_layer.forward(g, x)
    }
}

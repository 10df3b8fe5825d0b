//! Instance cropping with flip, rotation and scale jitter.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{InstanceRecord, KeypointSchema};
use crate::tensor::Tensor;

/// Default network input size `(height, width)`.
pub const INPUT_SIZE: (usize, usize) = (256, 256);

/// CLIP's RGB normalization constants.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        Image {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear lookup at a pixel-index coordinate; zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let x0 = libm::floor(x);
        let y0 = libm::floor(y);
        let (ax, ay) = ((x - x0) as f32, (y - y0) as f32);
        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0i64, 1.0 - ay), (1, ay)] {
            for (dx, wx) in [(0i64, 1.0 - ax), (1, ax)] {
                let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                let w = wx * wy;
                if w == 0.0 || xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    continue;
                }
                let p = self.pixel(xi as usize, yi as usize);
                for c in 0..3 {
                    out[c] += w * p[c];
                }
            }
        }
        out
    }

    /// Normalized `[3, height, width]` network input.
    pub fn to_tensor(&self, mean: [f64; 3], std: [f64; 3]) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = (px[c] as f64 - mean[c]) / std[c];
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out)
    }
}

/// 2x3 affine map `p -> A p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }

    /// `self` after `first`.
    pub fn then_after(&self, first: &Affine) -> Affine {
        let (a, b) = (&self.m, &first.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Affine { m }
    }

    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            return None;
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Some(Affine {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_deg: 40.0,
            scale_range: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No flip, no rotation, no scale change.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugmentConfig { seed, ..self.clone() }
    }

    pub fn draw(&self) -> AugmentDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let flip = self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob;
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        AugmentDraw {
            flip,
            rotation_deg,
            scale,
        }
    }
}

/// One concrete sample of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    /// Multiplier on the box size; values above 1 zoom out.
    pub scale: f64,
}

impl AugmentDraw {
    pub const NONE: AugmentDraw = AugmentDraw {
        flip: false,
        rotation_deg: 0.0,
        scale: 1.0,
    };
}

/// Maps the (aspect-padded, jittered, rotated, optionally mirrored) box onto
/// an `out_size = (height, width)` window.
pub fn box_to_window(bbox: [f64; 4], out_size: (usize, usize), draw: &AugmentDraw) -> Result<Affine> {
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::DegenerateBox { w, h });
    }
    let (oh, ow) = (out_size.0 as f64, out_size.1 as f64);
    let (cx, cy) = (x + 0.5 * w, y + 0.5 * h);
    // Pad the shorter side so the box has the window's aspect ratio.
    let (mut bw, mut bh) = (w, h);
    if bw * oh > bh * ow {
        bh = bw * oh / ow;
    } else {
        bw = bh * ow / oh;
    }
    bw *= draw.scale;
    bh *= draw.scale;
    let (sx, sy) = (ow / bw, oh / bh);
    let theta = draw.rotation_deg.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let (wx, wy) = (0.5 * ow, 0.5 * oh);
    // out = R * S * (p - c) + window_center
    let a = [[cos * sx, -sin * sy], [sin * sx, cos * sy]];
    let mut t = Affine {
        m: [
            [a[0][0], a[0][1], wx - a[0][0] * cx - a[0][1] * cy],
            [a[1][0], a[1][1], wy - a[1][0] * cx - a[1][1] * cy],
        ],
    };
    if draw.flip {
        let mirror = Affine {
            m: [[-1.0, 0.0, ow - 1.0], [0.0, 1.0, 0.0]],
        };
        t = mirror.then_after(&t);
    }
    Ok(t)
}

/// Mirrors keypoints inside a window of the given width and swaps the
/// left/right channels.
pub fn flip_keypoints(
    keypoints: &[[f64; 2]],
    visibility: &[u8],
    width: usize,
    schema: &KeypointSchema,
) -> (Vec<[f64; 2]>, Vec<u8>) {
    let perm = schema.flip_permutation();
    let w = width as f64;
    let kps = perm.iter().map(|&src| [(w - 1.0) - keypoints[src][0], keypoints[src][1]]).collect();
    let vis = perm.iter().map(|&src| visibility[src]).collect();
    (kps, vis)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: Image,
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
    /// Source-image to window transform (including any mirror).
    pub transform: Affine,
}

/// Cuts the instance box out of `image` and maps its keypoints into the
/// window. Keypoints that leave the window are marked unlabeled.
pub fn crop_instance(
    record: &InstanceRecord,
    image: &Image,
    schema: &KeypointSchema,
    out_size: (usize, usize),
    augment: &AugmentConfig,
) -> Result<Crop> {
    crop_with_draw(record, image, schema, out_size, &augment.draw())
}

pub fn crop_with_draw(
    record: &InstanceRecord,
    image: &Image,
    schema: &KeypointSchema,
    out_size: (usize, usize),
    draw: &AugmentDraw,
) -> Result<Crop> {
    let transform = box_to_window(record.bbox, out_size, draw)?;
    let inv = transform.inverse().ok_or(Error::DegenerateBox {
        w: record.bbox[2],
        h: record.bbox[3],
    })?;
    let (oh, ow) = out_size;
    let mut out = Image::new(ow, oh);
    for v in 0..oh {
        for u in 0..ow {
            let [x, y] = inv.apply([u as f64, v as f64]);
            out.set_pixel(u, v, image.sample(x, y));
        }
    }
    let mut keypoints: Vec<[f64; 2]> = Vec::with_capacity(record.keypoints.len());
    let mut visibility = Vec::with_capacity(record.keypoints.len());
    for kp in &record.keypoints {
        keypoints.push(transform.apply([kp.x, kp.y]));
        visibility.push(kp.v);
    }
    if draw.flip {
        // Coordinates are already mirrored by the transform; only the
        // channel order changes.
        let perm = schema.flip_permutation();
        keypoints = perm.iter().map(|&s| keypoints[s]).collect();
        visibility = perm.iter().map(|&s| visibility[s]).collect();
    }
    for (p, v) in keypoints.iter().zip(visibility.iter_mut()) {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < ow as f64 && p[1] < oh as f64) {
            *v = 0;
        }
    }
    Ok(Crop {
        image: out,
        keypoints,
        visibility,
        transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Keypoint;
    use proptest::prelude::*;

    fn rec(bbox: [f64; 4], kps: &[[f64; 2]], size: (u32, u32)) -> InstanceRecord {
        InstanceRecord {
            id: 1,
            image_id: 1,
            image_path: "a.png".into(),
            image_size: size,
            bbox,
            keypoints: kps.iter().map(|&[x, y]| Keypoint { x, y, v: 2 }).collect(),
            species: "dog".into(),
            family: "Canidae".into(),
            area: bbox[2] * bbox[3],
        }
    }

    fn two_point_schema() -> KeypointSchema {
        KeypointSchema::new(
            "t",
            vec!["left_eye".into(), "right_eye".into(), "nose".into()],
            vec![(0, 1)],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_crop_of_full_image() {
        let mut img = Image::new(256, 256);
        img.set_pixel(40, 70, [1.0, 0.5, 0.25]);
        let kps = [[10.0, 20.0], [200.5, 100.25], [128.0, 128.0]];
        let r = rec([0.0, 0.0, 256.0, 256.0], &kps, (256, 256));
        let crop = crop_instance(&r, &img, &two_point_schema(), (256, 256), &AugmentConfig::identity()).unwrap();
        for (a, b) in crop.keypoints.iter().zip(&kps) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert_eq!(crop.image.pixel(40, 70), [1.0, 0.5, 0.25]);
        assert_eq!(crop.visibility, vec![2, 2, 2]);
    }

    #[test]
    fn flip_mirrors_and_swaps_channels() {
        let img = Image::new(256, 256);
        let kps = [[10.0, 20.0], [30.0, 40.0], [128.0, 60.0]];
        let r = rec([0.0, 0.0, 256.0, 256.0], &kps, (256, 256));
        let draw = AugmentDraw { flip: true, ..AugmentDraw::NONE };
        let crop = crop_with_draw(&r, &img, &two_point_schema(), (256, 256), &draw).unwrap();
        // channel 0 now holds the former right eye, mirrored
        assert!((crop.keypoints[0][0] - (255.0 - 30.0)).abs() < 1e-9);
        assert!((crop.keypoints[1][0] - (255.0 - 10.0)).abs() < 1e-9);
        assert!((crop.keypoints[2][0] - 127.0).abs() < 1e-9);
        assert!((crop.keypoints[2][1] - 60.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_fixes_the_box_center() {
        let img = Image::new(300, 200);
        let r = rec([50.0, 20.0, 100.0, 160.0], &[[100.0, 100.0], [60.0, 30.0], [0.0, 0.0]], (300, 200));
        let draw = AugmentDraw {
            rotation_deg: 90.0,
            ..AugmentDraw::NONE
        };
        let crop = crop_with_draw(&r, &img, &two_point_schema(), (256, 256), &draw).unwrap();
        assert!((crop.keypoints[0][0] - 128.0).abs() < 1e-9);
        assert!((crop.keypoints[0][1] - 128.0).abs() < 1e-9);
    }

    #[test]
    fn aspect_padding_and_out_of_window_keypoints() {
        let img = Image::new(400, 400);
        // 200x100 box is padded to 200x200 around its center (200, 150).
        let r = rec([100.0, 100.0, 200.0, 100.0], &[[100.0, 150.0], [200.0, 40.0], [200.0, 300.0]], (400, 400));
        let crop = crop_instance(&r, &img, &two_point_schema(), (256, 256), &AugmentConfig::identity()).unwrap();
        assert!((crop.keypoints[0][0] - 0.0).abs() < 1e-9);
        assert!((crop.keypoints[0][1] - 128.0).abs() < 1e-9);
        assert!((crop.keypoints[1][1] - (-12.8)).abs() < 1e-9);
        assert_eq!(crop.visibility, vec![2, 0, 0]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let img = Image::new(10, 10);
        let r = rec([1.0, 1.0, 0.0, 5.0], &[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]], (10, 10));
        let err = crop_instance(&r, &img, &two_point_schema(), (256, 256), &AugmentConfig::identity());
        assert!(matches!(err, Err(Error::DegenerateBox { .. })));
    }

    #[test]
    fn augment_draws_are_seeded() {
        let cfg = AugmentConfig::default().with_seed(9);
        assert_eq!(cfg.draw(), cfg.draw());
        let d = cfg.draw();
        assert!(d.rotation_deg.abs() <= 40.0 && (0.5..=1.5).contains(&d.scale));
        assert_eq!(AugmentConfig::identity().draw(), AugmentDraw::NONE);
    }

    proptest! {
        #[test]
        fn flip_twice_is_identity(pts in proptest::collection::vec((0.0f64..256.0, 0.0f64..256.0), 3)) {
            let schema = two_point_schema();
            let kps: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let vis = vec![2u8, 1, 0];
            let (k1, v1) = flip_keypoints(&kps, &vis, 256, &schema);
            let (k2, v2) = flip_keypoints(&k1, &v1, 256, &schema);
            for (a, b) in k2.iter().zip(&kps) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && a[1] == b[1]);
            }
            prop_assert_eq!(v2, vis);
        }

        #[test]
        fn affine_round_trip(
            bx in 0.0f64..100.0, by in 0.0f64..100.0, bw in 1.0f64..300.0, bh in 1.0f64..300.0,
            rot in -40.0f64..40.0, scale in 0.5f64..1.5, flip in any::<bool>(),
            px in -50.0f64..500.0, py in -50.0f64..500.0,
        ) {
            let t = box_to_window([bx, by, bw, bh], (256, 256), &AugmentDraw { flip, rotation_deg: rot, scale }).unwrap();
            let back = t.inverse().unwrap().apply(t.apply([px, py]));
            prop_assert!((back[0] - px).abs() < 1e-6 && (back[1] - py).abs() < 1e-6);
        }
    }
}

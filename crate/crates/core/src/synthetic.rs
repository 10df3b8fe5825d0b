//! Procedural blob images with known keypoints, used for smoke training and
//! end-to-end tests.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Image;
use crate::error::Result;
use crate::schema::{DatasetSplit, InstanceRecord, Keypoint, KeypointSchema, SplitKind};

/// Keypoint names of the blob schema; every word is in the anatomy vocabulary.
pub const BLOB_KEYPOINTS: [&str; 5] = ["left_eye", "right_eye", "nose", "neck", "root_of_tail"];

/// Blob colours, one per keypoint.
const COLOURS: [[f32; 3]; 5] = [
    [1.0, 0.15, 0.1],
    [0.1, 0.9, 0.2],
    [0.15, 0.25, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.1, 0.95],
];

const TAXA: [(&str, &str); 2] = [("blob_cat", "Felidae"), ("blob_dog", "Canidae")];

pub fn blob_schema() -> KeypointSchema {
    KeypointSchema::new(
        "blobs",
        BLOB_KEYPOINTS.iter().map(|s| String::from(*s)).collect(),
        vec![(0, 1)],
        vec![(0, 2), (1, 2), (2, 3), (3, 4)],
        None,
    )
    .expect("static schema is valid")
}

#[derive(Clone, Debug)]
pub struct BlobConfig {
    pub count: usize,
    pub size: usize,
    /// Gaussian radius of each blob, in pixels.
    pub blob_sigma: f64,
    /// Keypoints are placed on multiples of this many pixels.
    pub grid: usize,
    pub margin: usize,
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            count: 8,
            size: 256,
            blob_sigma: 6.0,
            grid: 4,
            margin: 24,
            min_separation: 32.0,
            seed: 0,
        }
    }
}

/// Images and their whole-image instance annotations.
#[derive(Clone, Debug)]
pub struct BlobDataset {
    pub split: DatasetSplit,
    pub images: Vec<Image>,
}

impl BlobDataset {
    pub fn image_for(&self, record: &InstanceRecord) -> &Image {
        &self.images[(record.image_id - 1) as usize]
    }
}

fn place_keypoints(rng: &mut ChaCha8Rng, cfg: &BlobConfig) -> Vec<[f64; 2]> {
    let cells = (cfg.size - 2 * cfg.margin) / cfg.grid;
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(BLOB_KEYPOINTS.len());
    while out.len() < BLOB_KEYPOINTS.len() {
        let p = [
            (cfg.margin + rng.random_range(0..=cells) * cfg.grid) as f64,
            (cfg.margin + rng.random_range(0..=cells) * cfg.grid) as f64,
        ];
        if out.iter().all(|q| libm::hypot(p[0] - q[0], p[1] - q[1]) >= cfg.min_separation) {
            out.push(p);
        }
    }
    out
}

fn render(rng: &mut ChaCha8Rng, cfg: &BlobConfig, kps: &[[f64; 2]]) -> Image {
    let mut img = Image::new(cfg.size, cfg.size);
    let tint: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.25..0.45));
    let inv = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let mut px = tint;
            for (p, colour) in kps.iter().zip(COLOURS) {
                let (dx, dy) = (x as f64 - p[0], y as f64 - p[1]);
                let d2 = dx * dx + dy * dy;
                let w = libm::exp(-d2 * inv) as f32;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + colour[c] * w;
                }
            }
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// Deterministic in `cfg.seed`. Instance and image ids start at 1; each
/// instance covers its whole image.
pub fn blob_dataset(cfg: &BlobConfig) -> Result<BlobDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.count);
    let mut images = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let kps = place_keypoints(&mut rng, cfg);
        images.push(render(&mut rng, cfg, &kps));
        let (species, family) = TAXA[i % TAXA.len()];
        let id = i as u64 + 1;
        let s = cfg.size as f64;
        records.push(InstanceRecord {
            id,
            image_id: id,
            image_path: format!("blob_{id:04}.png"),
            image_size: (cfg.size as u32, cfg.size as u32),
            bbox: [0.0, 0.0, s, s],
            keypoints: kps.iter().map(|p| Keypoint { x: p[0], y: p[1], v: 2 }).collect(),
            species: species.into(),
            family: family.into(),
            area: s * s,
        });
    }
    Ok(BlobDataset {
        split: DatasetSplit::new(blob_schema(), records, SplitKind::Supervised)?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_well_placed() {
        let cfg = BlobConfig {
            count: 3,
            size: 128,
            margin: 16,
            ..BlobConfig::default()
        };
        let a = blob_dataset(&cfg).unwrap();
        let b = blob_dataset(&cfg).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.images, b.images);
        for r in &a.split.records {
            assert_eq!(r.area, 128.0 * 128.0);
            for k in &r.keypoints {
                assert_eq!(k.x % 4.0, 0.0);
                assert!(k.x >= 16.0 && k.x <= 112.0);
            }
            let img = a.image_for(r);
            let p = img.pixel(r.keypoints[2].x as usize, r.keypoints[2].y as usize);
            assert!((p[2] - COLOURS[2][2]).abs() < 1e-3);
        }
        assert_eq!(a.split.families().len(), 2);
    }
}

//! Keypoint vocabularies, instance annotations and dataset splits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::derive_seed;

/// Falloff used when a dataset publishes no per-keypoint constants.
pub const DEFAULT_OKS_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSchema {
    pub name: String,
    pub keypoint_names: Vec<String>,
    pub flip_pairs: Vec<(usize, usize)>,
    pub skeleton: Vec<(usize, usize)>,
    pub oks_sigmas: Vec<f64>,
}

impl KeypointSchema {
    /// Builds and validates a schema. `oks_sigmas = None` falls back to a
    /// uniform [`DEFAULT_OKS_SIGMA`].
    pub fn new(
        name: &str,
        keypoint_names: Vec<String>,
        flip_pairs: Vec<(usize, usize)>,
        skeleton: Vec<(usize, usize)>,
        oks_sigmas: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = keypoint_names.len();
        let schema = KeypointSchema {
            name: name.to_string(),
            oks_sigmas: oks_sigmas.unwrap_or_else(|| vec![DEFAULT_OKS_SIGMA; n]),
            keypoint_names,
            flip_pairs,
            skeleton,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.keypoint_names.len();
        if n == 0 {
            return Err(Error::Schema("schema has no keypoints".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &self.keypoint_names {
            if name.trim().is_empty() {
                return Err(Error::Schema("empty keypoint name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate keypoint name {name:?}")));
            }
        }
        let mut flipped = BTreeSet::new();
        for &(a, b) in &self.flip_pairs {
            if a >= n || b >= n || a == b {
                return Err(Error::Schema(format!("flip pair ({a}, {b}) invalid for {n} keypoints")));
            }
            if !flipped.insert(a) || !flipped.insert(b) {
                return Err(Error::Schema(format!("flip pair ({a}, {b}) overlaps another pair")));
            }
        }
        if let Some(&(a, b)) = self.skeleton.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Schema(format!("skeleton edge ({a}, {b}) invalid for {n} keypoints")));
        }
        if self.oks_sigmas.len() != n {
            return Err(Error::Schema(format!("{} OKS sigmas for {n} keypoints", self.oks_sigmas.len())));
        }
        if self.oks_sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Schema("OKS sigmas must be positive".into()));
        }
        Ok(())
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    /// Index permutation applied by a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_keypoints()).collect();
        for &(a, b) in &self.flip_pairs {
            perm.swap(a, b);
        }
        perm
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|k| k == name)
    }

    /// AP-10K's 17 keypoints, with the OKS constants published alongside the
    /// dataset.
    pub fn ap10k() -> Self {
        let names = [
            "left_eye",
            "right_eye",
            "nose",
            "neck",
            "root_of_tail",
            "left_shoulder",
            "left_elbow",
            "left_front_paw",
            "right_shoulder",
            "right_elbow",
            "right_front_paw",
            "left_hip",
            "left_knee",
            "left_back_paw",
            "right_hip",
            "right_knee",
            "right_back_paw",
        ];
        let skeleton = [
            (0, 1),
            (0, 2),
            (1, 2),
            (2, 3),
            (3, 4),
            (3, 5),
            (5, 6),
            (6, 7),
            (3, 8),
            (8, 9),
            (9, 10),
            (4, 11),
            (11, 12),
            (12, 13),
            (4, 14),
            (14, 15),
            (15, 16),
        ];
        let sigmas = [
            0.025, 0.025, 0.026, 0.035, 0.035, 0.079, 0.072, 0.062, 0.079, 0.072, 0.062, 0.107, 0.087, 0.089,
            0.107, 0.087, 0.089,
        ];
        KeypointSchema::new(
            "ap10k",
            names.iter().map(|s| s.to_string()).collect(),
            vec![(0, 1), (5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)],
            skeleton.to_vec(),
            Some(sigmas.to_vec()),
        )
        .expect("builtin schema is valid")
    }

    /// Animal-Pose's 20 keypoints.
    pub fn animal_pose() -> Self {
        let names = [
            "left_eye",
            "right_eye",
            "left_ear_base",
            "right_ear_base",
            "nose",
            "throat",
            "tail_base",
            "withers",
            "left_front_elbow",
            "right_front_elbow",
            "left_back_elbow",
            "right_back_elbow",
            "left_front_knee",
            "right_front_knee",
            "left_back_knee",
            "right_back_knee",
            "left_front_paw",
            "right_front_paw",
            "left_back_paw",
            "right_back_paw",
        ];
        let skeleton = [
            (0, 1),
            (0, 2),
            (1, 3),
            (0, 4),
            (1, 4),
            (4, 5),
            (5, 7),
            (6, 7),
            (7, 8),
            (7, 9),
            (6, 10),
            (6, 11),
            (8, 12),
            (9, 13),
            (10, 14),
            (11, 15),
            (12, 16),
            (13, 17),
            (14, 18),
            (15, 19),
        ];
        let sigmas = [
            0.025, 0.025, 0.026, 0.035, 0.035, 0.10, 0.10, 0.10, 0.107, 0.107, 0.107, 0.107, 0.087, 0.087, 0.087,
            0.087, 0.089, 0.089, 0.089, 0.089,
        ];
        KeypointSchema::new(
            "animal_pose",
            names.iter().map(|s| s.to_string()).collect(),
            vec![(0, 1), (2, 3), (8, 9), (10, 11), (12, 13), (14, 15), (16, 17), (18, 19)],
            skeleton.to_vec(),
            Some(sigmas.to_vec()),
        )
        .expect("builtin schema is valid")
    }
}

/// One annotated keypoint. `v` follows COCO: 0 unlabeled, 1 labeled but
/// occluded, 2 visible. Anything with `v > 0` counts as labeled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// Annotation id.
    pub id: u64,
    pub image_id: u64,
    pub image_path: String,
    /// `(width, height)` of the source image in pixels.
    pub image_size: (u32, u32),
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
    pub species: String,
    pub family: String,
    pub area: f64,
}

impl InstanceRecord {
    pub fn validate(&self, schema: &KeypointSchema) -> Result<()> {
        let fail = |reason: String| Err(Error::Record { id: self.id, reason });
        if self.keypoints.len() != schema.num_keypoints() {
            return Err(Error::KeypointArity {
                id: self.id,
                expected: 3 * schema.num_keypoints(),
                found: 3 * self.keypoints.len(),
            });
        }
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return fail(format!("bbox {:?} has non-positive size", self.bbox));
        }
        if !(self.area > 0.0) {
            return fail(format!("area {} is not positive", self.area));
        }
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        for (n, kp) in self.keypoints.iter().enumerate() {
            if kp.v > 2 {
                return fail(format!("keypoint {n} has visibility {}", kp.v));
            }
            if kp.labeled() && !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x <= w && kp.y <= h) {
                return fail(format!("keypoint {n} at ({}, {}) lies outside the {w}x{h} image", kp.x, kp.y));
            }
        }
        Ok(())
    }

    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.keypoints.iter().map(|k| [k.x, k.y]).collect()
    }

    pub fn visibility(&self) -> Vec<u8> {
        self.keypoints.iter().map(|k| k.v).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Supervised,
    Fewshot,
    ZeroshotTrain,
    ZeroshotTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub schema: KeypointSchema,
    pub records: Vec<InstanceRecord>,
    pub kind: SplitKind,
}

impl DatasetSplit {
    /// Validates every record against the schema.
    pub fn new(schema: KeypointSchema, records: Vec<InstanceRecord>, kind: SplitKind) -> Result<Self> {
        schema.validate()?;
        for r in &records {
            r.validate(&schema)?;
        }
        Ok(DatasetSplit { schema, records, kind })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Record count per species, in name order.
    pub fn species_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.species.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn families(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.family.clone()).collect()
    }

    /// Keeps the records whose ids are listed, in list order.
    pub fn select_ids(&self, ids: &[u64], kind: SplitKind) -> Result<Self> {
        let by_id: BTreeMap<u64, &InstanceRecord> = self.records.iter().map(|r| (r.id, r)).collect();
        let records = ids
            .iter()
            .map(|id| by_id.get(id).map(|r| (*r).clone()).ok_or(Error::UnknownInstance(*id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetSplit {
            schema: self.schema.clone(),
            records,
            kind,
        })
    }
}

/// Uniformly samples up to `per_species` records from each species without
/// replacement. Each species draws from its own generator seeded by
/// `(seed, species)`, so adding a species never changes another's sample.
/// Species with fewer records contribute all of them. Output is ordered by
/// annotation id.
pub fn build_fewshot_split(full: &DatasetSplit, per_species: usize, seed: u64) -> Result<DatasetSplit> {
    if full.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if per_species == 0 {
        return Err(Error::Config("per_species must be at least 1".into()));
    }
    let mut by_species: BTreeMap<&str, Vec<&InstanceRecord>> = BTreeMap::new();
    for r in &full.records {
        by_species.entry(r.species.as_str()).or_default().push(r);
    }
    let mut picked = Vec::new();
    for (species, mut recs) in by_species {
        recs.sort_by_key(|r| r.id);
        if recs.len() <= per_species {
            picked.extend(recs.into_iter().cloned());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, species.as_bytes()));
        let idx = rand::seq::index::sample(&mut rng, recs.len(), per_species);
        picked.extend(idx.iter().map(|i| recs[i].clone()));
    }
    picked.sort_by_key(|r| r.id);
    Ok(DatasetSplit {
        schema: full.schema.clone(),
        records: picked,
        kind: SplitKind::Fewshot,
    })
}

/// Partitions by family: the first split holds every record of
/// `train_families`, the second every record of `test_families`.
pub fn build_zeroshot_split(
    full: &DatasetSplit,
    train_families: &BTreeSet<String>,
    test_families: &BTreeSet<String>,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let overlap: Vec<String> = train_families.intersection(test_families).cloned().collect();
    if !overlap.is_empty() {
        return Err(Error::OverlappingFamilies(overlap));
    }
    let present = full.families();
    if let Some(missing) = train_families.iter().chain(test_families).find(|f| !present.contains(*f)) {
        return Err(Error::UnknownFamily(missing.clone()));
    }
    let pick = |fams: &BTreeSet<String>, kind| DatasetSplit {
        schema: full.schema.clone(),
        records: full.records.iter().filter(|r| fams.contains(&r.family)).cloned().collect(),
        kind,
    };
    Ok((
        pick(train_families, SplitKind::ZeroshotTrain),
        pick(test_families, SplitKind::ZeroshotTest),
    ))
}

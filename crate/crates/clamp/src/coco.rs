//! COCO keypoint annotation files.
//!
//! Each category contributes its `name` as the species and its
//! `supercategory` as the family. Keypoint names, and the skeleton, come
//! from the first category; every category must agree on them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clamp_core::schema::{DatasetSplit, InstanceRecord, Keypoint, KeypointSchema, SplitKind};
use serde::{Deserialize, Serialize};

use crate::error::{read_string, write_atomic, Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    /// Flat `[x1, y1, v1, x2, y2, v2, ...]`.
    pub keypoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
    pub keypoints: Vec<String>,
    /// One-based keypoint index pairs.
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

/// Which keypoint schema to attach to a loaded file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaChoice {
    /// A built-in schema when the names match one, else derived from the file.
    #[default]
    Auto,
    Ap10k,
    AnimalPose,
    /// Derived from the file: `left`/`right` name pairs become flip pairs.
    FromFile,
}

/// A loaded dataset plus where its images live.
#[derive(Clone, Debug)]
pub struct CocoDataset {
    pub split: DatasetSplit,
    pub image_root: PathBuf,
    /// Crowd annotations and annotations without labeled keypoints.
    pub dropped: Vec<u64>,
}

impl CocoDataset {
    pub fn image_path(&self, record: &InstanceRecord) -> PathBuf {
        self.image_root.join(&record.image_path)
    }
}

fn derive_schema(cat: &CocoCategory) -> Result<KeypointSchema> {
    let names = &cat.keypoints;
    let mut flips = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("left") {
            if let Some(j) = names.iter().position(|n| n.strip_prefix("right") == Some(rest)) {
                flips.push((i, j));
            }
        }
    }
    let n = names.len();
    let skeleton = cat
        .skeleton
        .iter()
        .map(|&[a, b]| {
            if a == 0 || b == 0 || a > n || b > n {
                Err(Error::Input(format!("categories[{}].skeleton: edge [{a}, {b}] outside 1..={n}", cat.id)))
            } else {
                Ok((a - 1, b - 1))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KeypointSchema::new(&cat.name, names.clone(), flips, skeleton, None)?)
}

fn choose_schema(choice: SchemaChoice, cat: &CocoCategory) -> Result<KeypointSchema> {
    let builtin = match choice {
        SchemaChoice::Ap10k => Some(KeypointSchema::ap10k()),
        SchemaChoice::AnimalPose => Some(KeypointSchema::animal_pose()),
        SchemaChoice::FromFile => None,
        SchemaChoice::Auto => [KeypointSchema::ap10k(), KeypointSchema::animal_pose()]
            .into_iter()
            .find(|s| s.keypoint_names == cat.keypoints),
    };
    match builtin {
        Some(s) if s.keypoint_names != cat.keypoints => Err(Error::Mismatch(format!(
            "schema {} expects keypoints {:?}, file lists {:?}",
            s.name, s.keypoint_names, cat.keypoints
        ))),
        Some(s) => Ok(s),
        None => derive_schema(cat),
    }
}

/// Parses an annotation file. `image_root` defaults to the file's directory.
pub fn load_coco(path: &Path, image_root: Option<&Path>, choice: SchemaChoice) -> Result<CocoDataset> {
    let text = read_string(path)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let first = file
        .categories
        .first()
        .ok_or_else(|| Error::format(path, "categories: no keypoint categories"))?;
    if let Some(c) = file.categories.iter().find(|c| c.keypoints != first.keypoints) {
        return Err(Error::format(path, format!("categories[id={}].keypoints differ from the first category", c.id)));
    }
    let schema = choose_schema(choice, first)?;
    let n = schema.num_keypoints();
    let images: BTreeMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let cats: BTreeMap<u64, &CocoCategory> = file.categories.iter().map(|c| (c.id, c)).collect();
    let mut records = Vec::with_capacity(file.annotations.len());
    let mut dropped = Vec::new();
    for a in &file.annotations {
        if a.keypoints.len() != 3 * n {
            return Err(clamp_core::Error::KeypointArity {
                id: a.id,
                expected: 3 * n,
                found: a.keypoints.len(),
            }
            .into());
        }
        let img = images
            .get(&a.image_id)
            .ok_or_else(|| Error::format(path, format!("annotations[id={}].image_id {} has no image", a.id, a.image_id)))?;
        let cat = cats.get(&a.category_id).ok_or_else(|| {
            Error::format(path, format!("annotations[id={}].category_id {} is not a category", a.id, a.category_id))
        })?;
        let keypoints: Vec<Keypoint> = a
            .keypoints
            .chunks_exact(3)
            .map(|k| Keypoint {
                x: k[0],
                y: k[1],
                v: k[2].clamp(0.0, 2.0) as u8,
            })
            .collect();
        if a.iscrowd != 0 || keypoints.iter().all(|k| !k.labeled()) {
            dropped.push(a.id);
            continue;
        }
        let area = match a.area {
            Some(v) if v > 0.0 => v,
            _ => a.bbox[2] * a.bbox[3],
        };
        records.push(InstanceRecord {
            id: a.id,
            image_id: a.image_id,
            image_path: img.file_name.clone(),
            image_size: (img.width, img.height),
            bbox: a.bbox,
            keypoints,
            species: cat.name.clone(),
            family: cat.supercategory.clone(),
            area,
        });
    }
    let image_root = match image_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(CocoDataset {
        split: DatasetSplit::new(schema, records, SplitKind::Supervised)?,
        image_root,
        dropped,
    })
}

/// Serializes a split as a COCO file, one category per species.
pub fn to_coco(split: &DatasetSplit) -> CocoFile {
    let mut species: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for r in &split.records {
        let next = species.len() as u64 + 1;
        species.entry((r.species.as_str(), r.family.as_str())).or_insert(next);
    }
    let mut images: BTreeMap<u64, CocoImage> = BTreeMap::new();
    let annotations = split
        .records
        .iter()
        .map(|r| {
            images.entry(r.image_id).or_insert_with(|| CocoImage {
                id: r.image_id,
                file_name: r.image_path.clone(),
                width: r.image_size.0,
                height: r.image_size.1,
            });
            CocoAnnotation {
                id: r.id,
                image_id: r.image_id,
                category_id: species[&(r.species.as_str(), r.family.as_str())],
                bbox: r.bbox,
                keypoints: r.keypoints.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect(),
                num_keypoints: Some(r.num_labeled()),
                area: Some(r.area),
                iscrowd: 0,
            }
        })
        .collect();
    let mut categories: Vec<CocoCategory> = species
        .iter()
        .map(|(&(name, family), &id)| CocoCategory {
            id,
            name: name.to_string(),
            supercategory: family.to_string(),
            keypoints: split.schema.keypoint_names.clone(),
            skeleton: split.schema.skeleton.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        })
        .collect();
    categories.sort_by_key(|c| c.id);
    CocoFile {
        images: images.into_values().collect(),
        annotations,
        categories,
    }
}

pub fn write_coco(path: &Path, split: &DatasetSplit) -> Result<()> {
    let json = serde_json::to_vec_pretty(&to_coco(split)).expect("COCO structures serialize");
    write_atomic(path, &json)
}

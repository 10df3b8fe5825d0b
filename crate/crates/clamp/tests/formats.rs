use std::collections::BTreeSet;
use std::io::Write;

use clamp::bpe::BpeTokenizer;
use clamp::coco::{load_coco, to_coco, write_coco, SchemaChoice};
use clamp::config::TokenizerSpec;
use clamp::harness::run_zeroshot;
use clamp::manifest::{read_ids, write_ids};
use clamp::results::{read_predictions, write_predictions};
use clamp::Error;
use clamp_core::eval::PredictionRecord;
use clamp_core::model::{ClampModel, ModelConfig};
use clamp_core::prompt::{Tokenizer, WordVocab};
use clamp_core::schema::KeypointSchema;
use clamp_core::synthetic::{blob_dataset, BlobConfig};
use clamp_core::train::TrainConfig;
use serde_json::json;

fn write_json(dir: &std::path::Path, name: &str, v: &serde_json::Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec(v).unwrap()).unwrap();
    p
}

fn two_keypoint_file(annotations: serde_json::Value) -> serde_json::Value {
    json!({
        "images": [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 80}],
        "categories": [{"id": 3, "name": "fox", "supercategory": "Canidae", "keypoints": ["left_ear", "right_ear"], "skeleton": [[1, 2]]}],
        "annotations": annotations
    })
}

#[test]
fn coco_loading_drops_crowds_and_unlabeled_instances() {
    let dir = tempfile::tempdir().unwrap();
    let file = two_keypoint_file(json!([
        {"id": 10, "image_id": 1, "category_id": 3, "bbox": [1, 2, 30, 40], "keypoints": [5, 6, 2, 0, 0, 0]},
        {"id": 11, "image_id": 1, "category_id": 3, "bbox": [1, 2, 30, 40], "keypoints": [5, 6, 2, 7, 8, 1], "iscrowd": 1},
        {"id": 12, "image_id": 1, "category_id": 3, "bbox": [1, 2, 30, 40], "keypoints": [0, 0, 0, 0, 0, 0]},
        {"id": 13, "image_id": 1, "category_id": 3, "bbox": [1, 2, 30, 40], "keypoints": [5, 6, 2, 7, 8, 1], "area": 900.0}
    ]));
    let path = write_json(dir.path(), "a.json", &file);
    let d = load_coco(&path, None, SchemaChoice::Auto).unwrap();
    assert_eq!(d.dropped, vec![11, 12]);
    assert_eq!(d.split.ids(), vec![10, 13]);
    assert_eq!(d.split.records[0].area, 1200.0);
    assert_eq!(d.split.records[1].area, 900.0);
    assert_eq!(d.split.records[0].family, "Canidae");
    assert_eq!(d.split.schema.flip_pairs, vec![(0, 1)]);
    assert_eq!(d.split.schema.skeleton, vec![(0, 1)]);
    assert_eq!(d.image_path(&d.split.records[0]), dir.path().join("a.jpg"));

    // Round trip through the writer.
    let out = dir.path().join("b.json");
    write_coco(&out, &d.split).unwrap();
    let back = load_coco(&out, None, SchemaChoice::FromFile).unwrap();
    assert_eq!(back.split.records, d.split.records);
}

#[test]
fn coco_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let arity = two_keypoint_file(json!([{"id": 7, "image_id": 1, "category_id": 3, "bbox": [0, 0, 1, 1], "keypoints": [1, 2, 2]}]));
    let err = load_coco(&write_json(dir.path(), "a.json", &arity), None, SchemaChoice::Auto).unwrap_err();
    assert!(matches!(err, Error::Core(clamp_core::Error::KeypointArity { id: 7, expected: 6, found: 3 })), "{err}");
    assert_eq!(err.exit_code(), 2);

    let orphan = two_keypoint_file(json!([{"id": 8, "image_id": 5, "category_id": 3, "bbox": [0, 0, 1, 1], "keypoints": [1, 2, 2, 0, 0, 0]}]));
    let err = load_coco(&write_json(dir.path(), "b.json", &orphan), None, SchemaChoice::Auto).unwrap_err();
    assert!(err.to_string().contains("annotations[id=8].image_id"), "{err}");

    let builtin = two_keypoint_file(json!([]));
    let err = load_coco(&write_json(dir.path(), "c.json", &builtin), None, SchemaChoice::Ap10k).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    let err = load_coco(&dir.path().join("missing.json"), None, SchemaChoice::Auto).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn builtin_schema_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ap10k = KeypointSchema::ap10k();
    let file = json!({
        "images": [],
        "annotations": [],
        "categories": [{"id": 1, "name": "dog", "supercategory": "Canidae", "keypoints": ap10k.keypoint_names}]
    });
    let path = write_json(dir.path(), "a.json", &file);
    let d = load_coco(&path, None, SchemaChoice::Auto).unwrap();
    assert_eq!(d.split.schema, ap10k);
    let derived = load_coco(&path, None, SchemaChoice::FromFile).unwrap();
    assert_eq!(derived.split.schema.oks_sigmas, vec![0.05; 17]);
}

#[test]
fn manifests_and_predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("nested/ids.json");
    write_ids(&ids, &[3, 1, 2]).unwrap();
    assert_eq!(read_ids(&ids).unwrap(), vec![3, 1, 2]);
    assert!(!dir.path().join("nested/ids.json.partial").exists());

    let preds = vec![(9, PredictionRecord::new(4, vec![[1.0, 2.0, 0.5], [3.0, 4.0, 1.0]]))];
    let path = dir.path().join("p.json");
    write_predictions(&path, &preds).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, vec![preds[0].1.clone()]);
    assert_eq!(back[0].score, 0.75);
}

#[test]
fn bpe_reads_gzipped_merges() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merges.txt.gz");
    let mut gz = flate2::write::GzEncoder::new(std::fs::File::create(&path).unwrap(), flate2::Compression::default());
    gz.write_all(b"#version: 0.2\nt a\nta i\ntai l</w>\n").unwrap();
    gz.finish().unwrap();
    let tok = BpeTokenizer::from_file(&path, usize::MAX).unwrap();
    assert_eq!(tok.vocab_size(), 512 + 3 + 2);
    assert_eq!(tok.tokenize("Tail").unwrap(), vec![512 + 2]);
    let spec = TokenizerSpec::Bpe {
        path: path.clone(),
        max_merges: 1,
    };
    assert_eq!(spec.build().unwrap().vocab_size(), 512 + 1 + 2);
}

#[test]
fn zeroshot_runs_train_on_one_family_and_test_on_the_other() {
    let data = blob_dataset(&BlobConfig {
        count: 4,
        ..BlobConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 1,
        lr_decay_epochs: vec![],
        batch_size: 2,
        ..TrainConfig::default()
    };
    let fam = |s: &str| BTreeSet::from([s.to_string()]);
    let make = || Ok(ClampModel::new(ModelConfig::default(), &data.split.schema, &WordVocab::anatomy())?);
    let spec = TokenizerSpec::default();
    let m = run_zeroshot(make, &spec, &data.split, &data, &fam("Felidae"), &fam("Canidae"), &config, dir.path()).unwrap();
    assert!((0.0..=1.0).contains(&m.ap));
    let csv = std::fs::read_to_string(dir.path().join("per_instance_oks.csv")).unwrap();
    // The two Canidae instances are the even ids.
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, vec!["2", "4"]);

    let err = run_zeroshot(make, &spec, &data.split, &data, &fam("Felidae"), &fam("Felidae"), &config, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn to_coco_groups_species() {
    let data = blob_dataset(&BlobConfig {
        count: 3,
        ..BlobConfig::default()
    })
    .unwrap();
    let file = to_coco(&data.split);
    assert_eq!(file.categories.len(), 2);
    assert_eq!(file.images.len(), 3);
    assert_eq!(file.annotations[0].keypoints.len(), 15);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clamp::checkpoint;
use clamp::harness::read_log;
use tempfile::TempDir;

fn clamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clamp")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A prepared synthetic dataset; returns (tempdir, config path).
fn dataset(count: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = clamp(&["prepare", "--synthetic", &count.to_string(), "--output-dir", s(&data)]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    (dir, data.join("clamp.toml"))
}

const SMOKE: [&str; 6] = ["--set", "epochs=2", "--set", "lr_decay_epochs=[]", "--set", "batch_size=2"];

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--output-dir", s(out)];
    args.extend_from_slice(&SMOKE);
    args.extend_from_slice(extra);
    clamp(&args)
}

#[test]
fn prepare_is_deterministic_and_splits_are_disjoint() {
    let (dir, cfg) = dataset(6);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = clamp(&[
            "prepare", "--config", s(&cfg), "--fewshot", "2", "--seed", "3", "--zeroshot", "Felidae:Canidae", "--output-dir", s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["fewshot.json", "zeroshot_train.json", "zeroshot_test.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ids = |f: &str| clamp::manifest::read_ids(&a.join(f)).unwrap();
    assert!(ids("fewshot.json").len() <= 2 * 2);
    let (train, test) = (ids("zeroshot_train.json"), ids("zeroshot_test.json"));
    assert_eq!(train.len() + test.len(), 6);
    assert!(train.iter().all(|i| !test.contains(i)));
}

#[test]
fn prepare_rejects_missing_annotations_and_bad_families() {
    let dir = tempfile::tempdir().unwrap();
    let out = clamp(&["prepare", "--set", "data.annotations=/nonexistent/a.json", "--fewshot", "2", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 2, "{}", text(&out));
    assert!(text(&out).contains("/nonexistent/a.json"));
    let (dir, cfg) = dataset(2);
    for spec in ["Felidae:Felidae", "Felidae:Ursidae", "Felidae"] {
        let out = clamp(&["prepare", "--config", s(&cfg), "--zeroshot", spec, "--output-dir", s(dir.path())]);
        assert_eq!(code(&out), 2, "{spec}: {}", text(&out));
    }
}

#[test]
fn configuration_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["bogus=1", "train.lr=-1", "loss_weights.alpha3=1", "lr_decay_epochs=[300]"] {
        let out = clamp(&["train", "--set", bad, "--output-dir", s(dir.path())]);
        assert_eq!(code(&out), 3, "{bad}: {}", text(&out));
    }
}

#[test]
fn smoke_train_writes_one_checkpoint_and_two_epochs_of_log() {
    let (dir, cfg) = dataset(1);
    let run = dir.path().join("run");
    let out = train(&cfg, &run, &[]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let ckpts: Vec<_> = std::fs::read_dir(run.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    let log = read_log(&run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert!(log.iter().all(|l| l.total.is_finite() && l.lr == 5e-4));
    assert!(run.join("config.toml").exists());
}

#[test]
fn training_is_reproducible_and_keeps_the_text_encoder_frozen() {
    let (dir, cfg) = dataset(3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let out = train(&cfg, run, &["--set", "checkpoint_every=1"]);
        assert_eq!(code(&out), 0, "{}", text(&out));
    }
    assert_eq!(std::fs::read(a.join("train_log.jsonl")).unwrap(), std::fs::read(b.join("train_log.jsonl")).unwrap());
    let final_a = std::fs::read(a.join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(final_a, std::fs::read(b.join("checkpoints/final.ckpt")).unwrap());

    let e1 = checkpoint::load(&a.join("checkpoints/epoch_0001.ckpt")).unwrap().model;
    let e2 = checkpoint::load(&a.join("checkpoints/final.ckpt")).unwrap().model;
    let mut text_params = 0;
    let mut prefix_moved = false;
    for ((_, p), (_, q)) in e1.store.iter().zip(e2.store.iter()) {
        let is_text = p.name.starts_with("transformer.")
            || ["token_embedding.weight", "positional_embedding", "text_projection"].contains(&p.name.as_str())
            || p.name.starts_with("ln_final.");
        if is_text {
            text_params += 1;
            assert_eq!(p.value, q.value, "{} changed", p.name);
        }
        if p.name.starts_with("prompt.prefix") && p.value != q.value {
            prefix_moved = true;
        }
    }
    assert!(text_params > 0);
    assert!(prefix_moved, "prefix vectors did not train");
}

#[test]
fn evaluate_writes_metrics_and_ignores_loss_weights() {
    let (dir, cfg) = dataset(3);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&cfg, &run, &[])), 0);
    let ckpt = run.join("checkpoints/final.ckpt");
    let eval = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--output-dir", s(&out_dir)];
        args.extend_from_slice(extra);
        let out = clamp(&args);
        assert_eq!(code(&out), 0, "{}", text(&out));
        out_dir
    };
    let a = eval("e1", &[]);
    let b = eval("e2", &["--set", "loss_weights.alpha1=0.3", "--set", "loss_weights.alpha2=0"]);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("metrics.json")).unwrap()).unwrap();
    let keys: Vec<&String> = metrics.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 6, "{keys:?}");
    for f in ["metrics.json", "per_instance_oks.csv", "predictions.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("per_instance_oks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("instance_id,area,score,oks\n"));
}

#[test]
fn checkpoint_problems_have_distinct_exit_codes() {
    let (dir, cfg) = dataset(2);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&cfg, &run, &[])), 0);
    let ckpt = run.join("checkpoints/final.ckpt");
    let out_dir = dir.path().join("e");
    let out = clamp(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--set", "model.encoder.embed_dim=64", "--output-dir", s(&out_dir)]);
    assert_eq!(code(&out), 3, "{}", text(&out));

    // A dataset with a different keypoint count.
    let coco = std::fs::read_to_string(cfg.parent().unwrap().join("annotations.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&coco).unwrap();
    for c in v["categories"].as_array_mut().unwrap() {
        c["keypoints"].as_array_mut().unwrap().pop();
        c["skeleton"] = serde_json::json!([]);
    }
    for a in v["annotations"].as_array_mut().unwrap() {
        let k = a["keypoints"].as_array_mut().unwrap();
        k.truncate(k.len() - 3);
    }
    let four = dir.path().join("four.json");
    std::fs::write(&four, serde_json::to_vec(&v).unwrap()).unwrap();
    let images = cfg.parent().unwrap().join("images");
    let out = clamp(&[
        "evaluate", "--checkpoint", s(&ckpt), "--set", &format!("data.annotations={}", s(&four)), "--set",
        &format!("data.images={}", s(&images)), "--output-dir", s(&out_dir),
    ]);
    assert_eq!(code(&out), 3, "{}", text(&out));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = clamp(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&junk), "--output-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn visualize_writes_one_file_per_keypoint_or_image() {
    let (dir, cfg) = dataset(2);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&cfg, &run, &[])), 0);
    let ckpt = run.join("checkpoints/final.ckpt");
    let count = |mode: &str, extra: &[&str]| {
        let out_dir = dir.path().join(mode).join(extra.len().to_string());
        let mut args = vec!["visualize", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--ids", "1,2", "--mode", mode, "--output-dir", s(&out_dir)];
        args.extend_from_slice(extra);
        let out = clamp(&args);
        assert_eq!(code(&out), 0, "{}", text(&out));
        std::fs::read_dir(&out_dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
    };
    assert_eq!(count("scoremap", &[]), 2 * 5);
    assert_eq!(count("scoremap", &["--keypoints", "nose,neck"]), 2 * 2);
    assert_eq!(count("skeleton", &[]), 2);
    assert_eq!(count("matchmatrix", &[]), 2);

    let out = clamp(&["visualize", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--ids", "1", "--mode", "scoremap", "--keypoints", "tail", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("left_eye, right_eye, nose, neck, root_of_tail"), "{}", text(&out));
    let out = clamp(&["visualize", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--ids", "99", "--mode", "skeleton", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn quick_selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = clamp(&["selfcheck", "--quick", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let t = text(&out);
    assert!(t.contains("PASS gradient_oracle") && t.contains("SKIP overfit_smoke"), "{t}");
}

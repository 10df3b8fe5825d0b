use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::schema::Keypoint;

fn gt(id: u64, kps: &[[f64; 2]], area: f64) -> InstanceRecord {
    InstanceRecord {
        id,
        image_id: id,
        image_path: "x.png".into(),
        image_size: (1000, 1000),
        bbox: [0.0, 0.0, 100.0, 100.0],
        keypoints: kps.iter().map(|p| Keypoint { x: p[0], y: p[1], v: 2 }).collect(),
        species: "dog".into(),
        family: "Canidae".into(),
        area,
    }
}

fn exact(g: &InstanceRecord, score: f64) -> PredictionRecord {
    PredictionRecord {
        instance_id: g.id,
        keypoints: g.keypoints.iter().map(|k| [k.x, k.y, score]).collect(),
        score,
    }
}

/// Distance at which a single keypoint has OKS `o`.
fn dist_for(o: f64, area: f64, sigma: f64) -> f64 {
    libm::sqrt(-libm::log(o) * 2.0 * area * (2.0 * sigma) * (2.0 * sigma))
}

#[test]
fn oks_scalar_cases() {
    let g = gt(1, &[[50.0, 50.0]], 400.0);
    let sigma = [0.1];
    assert_eq!(compute_oks(&exact(&g, 1.0), &g, &sigma).unwrap(), 1.0);
    let d2: f64 = 2.0 * 400.0 * 0.04 * 0.5;
    let p = PredictionRecord::new(1, vec![[50.0 + libm::sqrt(d2), 50.0, 1.0]]);
    assert!((compute_oks(&p, &g, &sigma).unwrap() - libm::exp(-0.5)).abs() < 1e-12);
    let far = PredictionRecord::new(1, vec![[1e9, 1e9, 1.0]]);
    assert!(compute_oks(&far, &g, &sigma).unwrap() < 1e-300);
}

#[test]
fn oks_ignores_unlabeled_and_rejects_empty() {
    let mut g = gt(2, &[[10.0, 10.0], [20.0, 20.0]], 100.0);
    g.keypoints[1].v = 0;
    let p = PredictionRecord::new(2, vec![[10.0, 10.0, 1.0], [900.0, 900.0, 1.0]]);
    assert_eq!(compute_oks(&p, &g, &[0.1, 0.1]).unwrap(), 1.0);
    g.keypoints[0].v = 0;
    assert_eq!(compute_oks(&p, &g, &[0.1, 0.1]), Err(Error::NoLabeledKeypoints(2)));
    assert!(matches!(compute_oks(&p, &g, &[0.1]), Err(Error::KeypointArity { .. })));
}

#[test]
fn oks_is_monotone_and_scale_invariant() {
    let g = gt(3, &[[10.0, 10.0], [40.0, 30.0]], 900.0);
    let sig = [0.05, 0.08];
    let mut prev = 1.0;
    for step in 1..30 {
        let d = step as f64;
        let p = PredictionRecord::new(3, vec![[10.0 + d, 10.0, 1.0], [40.0, 30.0, 1.0]]);
        let o = compute_oks(&p, &g, &sig).unwrap();
        assert!(o <= prev);
        prev = o;
    }
    let c = 3.5;
    let p = PredictionRecord::new(3, vec![[13.0, 12.0, 1.0], [37.0, 35.0, 1.0]]);
    let gs = gt(3, &[[10.0 * c, 10.0 * c], [40.0 * c, 30.0 * c]], 900.0 * c * c);
    let ps = PredictionRecord::new(3, vec![[13.0 * c, 12.0 * c, 1.0], [37.0 * c, 35.0 * c, 1.0]]);
    let (a, b) = (compute_oks(&p, &g, &sig).unwrap(), compute_oks(&ps, &gs, &sig).unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn hand_integrated_three_instance_curve() {
    let (ap, rec) = ap_and_recall(&[(0.9, 1.0), (0.8, 0.7), (0.7, 0.4)], 3);
    // Thresholds up to 0.70 match two of three; above, only the first.
    for (i, t) in oks_thresholds().into_iter().enumerate() {
        let (want_ap, want_rec) = if t <= 0.7 { (67.0 / 101.0, 2.0 / 3.0) } else { (34.0 / 101.0, 1.0 / 3.0) };
        assert!((ap[i] - want_ap).abs() < 1e-12, "threshold {t}");
        assert!((rec[i] - want_rec).abs() < 1e-12);
    }
}

#[test]
fn evaluate_end_to_end_and_perfect() {
    let sigma = [0.1];
    let area = 10_000.0;
    let gts: Vec<InstanceRecord> = (1..=3).map(|i| gt(i, &[[100.0, 100.0]], area)).collect();
    let preds: Vec<PredictionRecord> = [(1, 1.0, 0.9), (2, 0.72, 0.8), (3, 0.4, 0.7)]
        .iter()
        .map(|&(id, o, s)| PredictionRecord::new(id, vec![[100.0 + dist_for(o, area, 0.1), 100.0, s]]))
        .collect();
    let e = evaluate(&preds, &gts, &sigma).unwrap();
    let m = e.metrics;
    assert!((m.ap - 0.5).abs() < 1e-9);
    assert!((m.ap50 - 67.0 / 101.0).abs() < 1e-9);
    assert!((m.ap75 - 34.0 / 101.0).abs() < 1e-9);
    assert!((m.ar - 0.5).abs() < 1e-9);
    assert_eq!(m.apm, -1.0);
    assert!((m.apl - m.ap).abs() < 1e-12);
    assert!(m.ap50 >= m.ap75);
    assert!((e.per_instance[1].oks.unwrap() - 0.72).abs() < 1e-9);

    let perfect: Vec<PredictionRecord> = gts.iter().map(|g| exact(g, 0.5)).collect();
    let mut gts_m = gts.clone();
    gts_m[0].area = 2000.0;
    let m = evaluate(&perfect, &gts_m, &sigma).unwrap().metrics;
    assert_eq!(m, Metrics { ap: 1.0, ap50: 1.0, ap75: 1.0, apm: 1.0, apl: 1.0, ar: 1.0 });
}

#[test]
fn all_wrong_gives_zero() {
    let gts: Vec<InstanceRecord> = (1..=4).map(|i| gt(i, &[[10.0, 10.0]], 100.0)).collect();
    let preds: Vec<PredictionRecord> = (1..=4).map(|i| PredictionRecord::new(i, vec![[500.0, 500.0, 1.0]])).collect();
    let m = evaluate(&preds, &gts, &[0.1]).unwrap().metrics;
    assert_eq!((m.ap, m.ar), (0.0, 0.0));
}

#[test]
fn equal_oks_makes_ranking_irrelevant() {
    let area = 5000.0;
    let gts: Vec<InstanceRecord> = (1..=5).map(|i| gt(i, &[[50.0, 50.0]], area)).collect();
    let d = dist_for(0.8, area, 0.1);
    let run = |scores: [f64; 5]| {
        let preds: Vec<PredictionRecord> =
            (0..5).map(|i| PredictionRecord::new(i as u64 + 1, vec![[50.0 + d, 50.0, scores[i]]])).collect();
        evaluate(&preds, &gts, &[0.1]).unwrap().metrics
    };
    assert_eq!(run([0.1, 0.2, 0.3, 0.4, 0.5]), run([0.5, 0.1, 0.4, 0.2, 0.3]));
}

#[test]
fn unknown_ids_duplicates_and_skips() {
    let mut gts: Vec<InstanceRecord> = (1..=2).map(|i| gt(i, &[[10.0, 10.0]], 100.0)).collect();
    let stray = PredictionRecord::new(9, vec![[0.0, 0.0, 1.0]]);
    assert_eq!(evaluate(&[stray], &gts, &[0.1]), Err(Error::UnknownInstance(9)));
    let p = exact(&gts[0], 1.0);
    assert!(evaluate(&[p.clone(), p.clone()], &gts, &[0.1]).is_err());
    gts[1].keypoints[0].v = 0;
    let e = evaluate(&[p.clone()], &gts, &[0.1]).unwrap();
    assert_eq!(e.skipped, vec![2]);
    assert_eq!(e.metrics.ap, 1.0);
    // A missing prediction halves recall.
    gts[1].keypoints[0].v = 2;
    let e = evaluate(&[p], &gts, &[0.1]).unwrap();
    assert_eq!(e.metrics.ar, 0.5);
    assert_eq!(missing_predictions(&[], &gts), vec![1, 2]);
}

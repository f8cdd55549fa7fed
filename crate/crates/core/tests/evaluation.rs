use asd_core::evaluation::{
    average_precision, breakdown, evaluate, f1_score, frames_from_scores, join_annotations, read_annotations,
    read_scores, write_scores, Facet, ScoreRow, ScoredFrame,
};
use asd_core::synthetic_data::{plan_dataset, write_annotations, Manifest, RenderOptions};
use asd_core::AsdError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(scores: &[f64], labels: &[u8]) -> Vec<ScoredFrame> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredFrame::new("c", i, s, l))
        .collect()
}

/// For every prefix of the descending-score order, recount the positives
/// in that prefix from scratch; add precision@k at each positive.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = Vec::new();
    let mut left: Vec<usize> = (0..n).collect();
    while !left.is_empty() {
        let best = (0..left.len()).fold(0, |b, j| if scores[left[j]] > scores[left[b]] { j } else { b });
        order.push(left.remove(best));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut total = 0.0;
    for k in 1..=n {
        if labels[order[k - 1]] == 1 {
            let hits = order[..k].iter().filter(|&&i| labels[i] == 1).count();
            total += hits as f64 / k as f64;
        }
    }
    total / positives as f64
}

/// Exact AP as a fraction with denominator `840 · P` (840 = lcm(1..=8)).
fn rational_ap(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut num) = (0u64, 0u64);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            num += hits * 840 / (k as u64 + 1);
        }
    }
    (num, 840 * labels.iter().filter(|&&l| l == 1).count() as u64)
}

#[test]
fn worked_example() {
    let ap = average_precision(&frames(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap();
    assert!((ap - 0.8333333333333334).abs() < 1e-9);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn perfect_ranking_and_all_positive() {
    assert_eq!(average_precision(&frames(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
    assert_eq!(average_precision(&frames(&[0.1, 0.7, 0.3], &[1, 1, 1])).unwrap(), 1.0);
    assert!(matches!(average_precision(&frames(&[0.4, 0.6], &[0, 0])), Err(AsdError::UndefinedMetric(_))));
}

#[test]
fn matches_brute_force_on_every_labeling_of_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for round in 0..5 {
        // distinct scores, shuffled
        let mut scores: Vec<f64> = (0..8).map(|i| (i as f64 + rng.random::<f64>() * 0.5) / 8.0).collect();
        for i in (1..8).rev() {
            scores.swap(i, rng.random_range(0..=i));
        }
        for mask in 0u32..256 {
            let labels: Vec<u8> = (0..8).map(|b| ((mask >> b) & 1) as u8).collect();
            let got = average_precision(&frames(&scores, &labels));
            if mask == 0 {
                assert!(matches!(got, Err(AsdError::UndefinedMetric(_))));
                continue;
            }
            let got = got.unwrap();
            assert_eq!(got, brute_force_ap(&scores, &labels), "round {round} mask {mask:08b}");
            let (num, den) = rational_ap(&scores, &labels);
            assert!((got - num as f64 / den as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn ties_are_broken_by_clip_and_frame() {
    // equal scores: the earlier frame ranks first
    let f = frames(&[0.5, 0.5], &[0, 1]);
    assert_eq!(average_precision(&f).unwrap(), 0.5);
    let f = frames(&[0.5, 0.5], &[1, 0]);
    assert_eq!(average_precision(&f).unwrap(), 1.0);
}

#[test]
fn f1_examples() {
    // TP = 2, FP = 1, FN = 1
    let f = frames(&[0.9, 0.8, 0.7, 0.2, 0.1], &[1, 1, 0, 1, 0]);
    assert!((f1_score(&f, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(f1_score(&frames(&[0.9, 0.1], &[1, 0]), 0.5).unwrap(), 1.0);
    assert_eq!(f1_score(&frames(&[0.1, 0.2], &[0, 0]), 0.5).unwrap(), 0.0);
}

#[test]
fn f1_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = 20;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (s, l) in scores.iter().zip(&labels) {
            match (*s >= 0.5, *l == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let want = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        let got = f1_score(&frames(&scores, &labels), 0.5).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn breakdown_buckets() {
    let mut f = frames(&[0.9, 0.1, 0.6], &[1, 0, 1]);
    for x in &mut f {
        x.face_width_px = 100;
    }
    let b = breakdown(&f, Facet::FaceSize).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!((b[0].bucket.as_str(), b[0].count), ("middle", 3));

    for (x, w) in f.iter_mut().zip([32, 100, 200]) {
        x.face_width_px = w;
    }
    let b = breakdown(&f, Facet::FaceSize).unwrap();
    assert_eq!(b.iter().map(|b| (b.bucket.as_str(), b.count)).collect::<Vec<_>>(), vec![("small", 1), ("middle", 1), ("large", 1)]);
    // middle holds only a negative
    assert_eq!(b[1].map, None);

    for (x, n) in f.iter_mut().zip([1, 3, 3]) {
        x.n_faces = n;
    }
    let b = breakdown(&f, Facet::NFaces).unwrap();
    assert_eq!(b.iter().map(|b| (b.bucket.as_str(), b.count)).collect::<Vec<_>>(), vec![("1", 1), ("3", 2)]);
}

#[test]
fn degraded_small_faces_score_lower() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut all = Vec::new();
    for i in 0..400 {
        let label = (i % 2) as u8;
        let small = i % 4 < 2;
        // small faces: scores barely depend on the label
        let signal: f64 = if small { 0.05 } else { 0.4 };
        let score = (0.5 + if label == 1 { signal } else { -signal } + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0);
        let mut f = ScoredFrame::new(format!("c{i}"), 0, score, label);
        f.face_width_px = if small { 40 } else { 180 };
        all.push(f);
    }
    let b = breakdown(&all, Facet::FaceSize).unwrap();
    let (small, large) = (b[0].map.unwrap(), b[1].map.unwrap());
    assert_eq!((b[0].bucket.as_str(), b[1].bucket.as_str()), ("small", "large"));
    assert!(small < large, "{small} vs {large}");
}

#[test]
fn score_csv_and_annotation_join() {
    let dir = tempfile::tempdir().unwrap();
    let specs = plan_dataset(6, &"1:0.5,2:0.5".parse().unwrap(), [0.2, 0.3], 25.0, 4).unwrap();
    let m = Manifest::in_memory(specs, RenderOptions::default(), 4);
    write_annotations(dir.path().join("ann.csv"), &m).unwrap();
    let mut rows = Vec::new();
    for (k, spec) in m.clips.iter().enumerate() {
        for f in 0..spec.frames {
            rows.push(ScoreRow {
                clip_id: spec.clip_id.clone(),
                frame_index: f,
                score: (k * 31 + f * 7) as f64 % 100.0 / 100.0,
                label: (k % 2 == 0).then(|| spec.label()),
            });
        }
    }
    write_scores(dir.path().join("scores.csv"), &rows).unwrap();
    let back = read_scores(dir.path().join("scores.csv")).unwrap();
    assert_eq!(back, rows);

    let ann = read_annotations(dir.path().join("ann.csv")).unwrap();
    let joined = join_annotations(&back, &ann, 25.0).unwrap();
    for (j, r) in joined.iter().zip(&rows) {
        let spec = m.clips.iter().find(|s| s.clip_id == r.clip_id).unwrap();
        assert_eq!(j.label, spec.label());
        assert_eq!(j.n_faces, spec.meta.n_faces_in_scene);
        assert!((j.face_width_px as i64 - spec.meta.face_width_px as i64).abs() <= 1);
    }
    let report = evaluate(&joined).unwrap();
    assert_eq!(report.frames, rows.len());
    assert!(serde_json::to_string(&report).unwrap().contains("\"buckets\""));

    // labels only partially present in the score file
    assert!(frames_from_scores(&back).is_err());
    let mut wrong = back.clone();
    wrong[0].label = Some(1 - m.clips[0].label());
    assert!(join_annotations(&wrong, &ann, 25.0).is_err());
}

proptest! {
    #[test]
    fn ap_is_invariant_under_monotone_transforms(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..=1), 2..40),
        a in 0.1f64..5.0,
        b in -3.0f64..3.0,
    ) {
        prop_assume!(pairs.iter().any(|p| p.1 == 1));
        let (s, l): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let t: Vec<f64> = s.iter().map(|x| (a * x + b).exp()).collect();
        prop_assert_eq!(average_precision(&frames(&s, &l)).unwrap(), average_precision(&frames(&t, &l)).unwrap());
    }

    #[test]
    fn f1_ignores_perturbations_that_stay_on_one_side(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..=1, 0.0f64..1.0), 1..40),
    ) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let l: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        // move each score a random fraction of the way toward its side's extreme
        let moved: Vec<f64> = pairs.iter().map(|&(x, _, u)| if x >= 0.5 { x + (1.0 - x) * u } else { x * (1.0 - u) }).collect();
        prop_assert_eq!(f1_score(&frames(&s, &l), 0.5).unwrap(), f1_score(&frames(&moved, &l), 0.5).unwrap());
    }
}

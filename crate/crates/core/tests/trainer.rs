use asd_core::audio_features::{write_wav, Waveform};
use asd_core::augmentation::AugmentationPlan;
use asd_core::synthetic_data::{plan_dataset, ClipSpec, Manifest, RenderOptions};
use asd_core::trainer::{
    adam_step, epoch_batches, load_model, lr_at_epoch, predict_clip, score_manifest, train, AdamConfig, ScoreOptions,
    TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};
use asd_core::{AsdError, Float};

fn manifest(n: usize, seconds: [f64; 2], seed: u64) -> Manifest {
    let specs = plan_dataset(n, &"1:0.5,2:0.5".parse().unwrap(), seconds, 25.0, seed).unwrap();
    Manifest::in_memory(specs, RenderOptions::default(), seed)
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p: Vec<Float> = vec![0.5, -2.0, 3.0];
    let before = p.clone();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for t in 1..=5 {
        adam_step(&mut p, &[0.0; 3], &mut m, &mut v, t, 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn first_step_on_a_parabola_descends() {
    let mut x: Vec<Float> = vec![1.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    let g = [2.0 * x[0]];
    adam_step(&mut x, &g, &mut m, &mut v, 1, 0.1, &AdamConfig::default()).unwrap();
    assert!(x[0] < 1.0);
    // the bias-corrected first step has length lr
    assert!((x[0] - 0.9).abs() < 1e-6);
    assert!(adam_step(&mut x, &[1.0, 2.0], &mut m, &mut v, 2, 0.1, &AdamConfig::default()).is_err());
}

#[test]
fn converges_on_a_two_dimensional_quadratic() {
    // f(x, y) = (x − 3)² + 10 (y + 1)², minimum at (3, −1)
    let target = [3.0, -1.0];
    let mut p: Vec<Float> = vec![0.0, 0.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    for t in 1..=200 {
        let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
        adam_step(&mut p, &g, &mut m, &mut v, t, 0.1, &AdamConfig::default()).unwrap();
    }
    let dist = ((p[0] as f64 - target[0]).powi(2) + (p[1] as f64 - target[1]).powi(2)).sqrt();
    assert!(dist < 1e-3, "{p:?}");
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(&cfg, 0), 1e-4);
    assert!((lr_at_epoch(&cfg, 1) - 9.5e-5).abs() < 1e-15);
    assert!((lr_at_epoch(&cfg, 2) - 9.025e-5).abs() < 1e-15);
}

#[test]
fn fixed_frames_crop_every_item() {
    let m = manifest(6, [2.0, 2.0], 1);
    let cfg = TrainConfig { fixed_frames: Some(25), ..Default::default() };
    let trainer = Trainer::new(cfg.clone()).unwrap();
    for idx in epoch_batches(&m, &cfg, 0) {
        let b = trainer.prepare_batch(&m, &idx, 0).unwrap();
        assert_eq!(b.frames, 25);
        assert!(b.lengths.iter().all(|&l| l == 25));
        assert_eq!(b.faces.shape(), &[idx.len(), 1, 25, 112, 112]);
        assert_eq!(b.mfcc.shape(), &[idx.len(), 100, 13]);
        assert!(b.mask.iter().all(|&x| x));
    }
    // shorter clips are padded and masked
    let short = manifest(2, [0.2, 0.2], 2);
    let b = trainer.prepare_batch(&short, &[0, 1], 0).unwrap();
    assert_eq!(b.lengths, vec![5, 5]);
    assert_eq!(b.mask.iter().filter(|&&x| x).count(), 10);
}

#[test]
fn epoch_order_covers_every_clip_and_buckets_lengths() {
    let m = manifest(23, [1.0, 4.0], 3);
    let cfg = TrainConfig { batch_size: 4, ..Default::default() };
    let batches = epoch_batches(&m, &cfg, 0);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort();
    assert_eq!(seen, (0..23).collect::<Vec<_>>());
    // buckets are contiguous runs of the length-sorted order
    let mut ranges: Vec<(usize, usize)> = batches
        .iter()
        .map(|b| {
            let lens: Vec<usize> = b.iter().map(|&i| m.clips[i].frames).collect();
            (*lens.iter().min().unwrap(), *lens.iter().max().unwrap())
        })
        .collect();
    ranges.sort();
    assert!(ranges.windows(2).all(|w| w[0].1 <= w[1].0));
    assert_ne!(batches, epoch_batches(&m, &cfg, 1));
    assert_eq!(batches, epoch_batches(&m, &cfg, 0));
}

#[test]
fn negative_sampling_changes_audio_only() {
    let m = manifest(4, [1.0, 1.0], 4);
    let plain = Trainer::new(TrainConfig { augmentation: AugmentationPlan::none(), ..Default::default() }).unwrap();
    let mixed = Trainer::new(TrainConfig {
        augmentation: AugmentationPlan { visual: AugmentationPlan::none().visual, ..Default::default() },
        ..Default::default()
    })
    .unwrap();
    let (a, b) = (plain.prepare_batch(&m, &[0, 1, 2, 3], 0).unwrap(), mixed.prepare_batch(&m, &[0, 1, 2, 3], 0).unwrap());
    assert_eq!(a.faces, b.faces);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.mfcc, b.mfcc);
    // a single-clip batch has nothing to mix in
    let solo = mixed.prepare_batch(&m, &[2], 0).unwrap();
    assert_eq!(solo.mfcc, plain.prepare_batch(&m, &[2], 0).unwrap().mfcc);

    let dir = tempfile::tempdir().unwrap();
    let hum: Vec<Float> = (0..8000).map(|i| (i as Float * 0.05).sin() * 0.3).collect();
    write_wav(dir.path().join("hum.wav"), &Waveform::new(hum, 16_000).unwrap()).unwrap();
    let external = Trainer::new(TrainConfig {
        augmentation: AugmentationPlan {
            neg_sampling: false,
            noise_dir: Some(dir.path().to_path_buf()),
            ..AugmentationPlan::none()
        },
        ..Default::default()
    })
    .unwrap();
    let solo = external.prepare_batch(&m, &[2], 0).unwrap();
    assert_ne!(solo.mfcc, plain.prepare_batch(&m, &[2], 0).unwrap().mfcc);
}

#[test]
fn loss_decreases_on_a_repeated_batch() {
    let m = manifest(4, [1.0, 1.0], 5);
    let mut t = Trainer::new(TrainConfig { augmentation: AugmentationPlan::none(), seed: 5, ..Default::default() }).unwrap();
    let batch = t.prepare_batch(&m, &[0, 1, 2, 3], 0).unwrap();
    let losses: Vec<f64> = (0..10).map(|_| t.step(&batch, 1e-4).unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn overfits_four_clips() {
    let m = manifest(4, [1.0, 1.0], 6);
    let mut t = Trainer::new(TrainConfig { augmentation: AugmentationPlan::none(), seed: 6, ..Default::default() }).unwrap();
    let batch = t.prepare_batch(&m, &[0, 1, 2, 3], 0).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = t.step(&batch, 1e-4).unwrap();
    }
    assert!(loss < 0.05, "{loss}");
}

#[test]
fn variable_lengths_from_one_to_ten_seconds() {
    let mut specs: Vec<ClipSpec> = plan_dataset(4, &"1:0.5,2:0.5".parse().unwrap(), [1.0, 1.0], 25.0, 7).unwrap();
    for (s, frames) in specs.iter_mut().zip([25, 250, 120, 60]) {
        s.frames = frames;
    }
    let m = Manifest::in_memory(specs, RenderOptions::default(), 7);
    let cfg = TrainConfig { batch_size: 2, epochs: 1, ..Default::default() };
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let batches = epoch_batches(&m, &cfg, 0);
    assert_eq!(batches.len(), 2);
    for idx in &batches {
        let b = t.prepare_batch(&m, idx, 0).unwrap();
        let want = idx.iter().map(|&i| m.clips[i].frames).max().unwrap();
        assert_eq!(b.frames, want);
        assert_eq!(b.mask.iter().filter(|&&x| x).count(), idx.iter().map(|&i| m.clips[i].frames).sum::<usize>());
        assert!(t.step(&b, 1e-4).unwrap().is_finite());
    }
}

#[test]
fn same_seed_same_run() {
    let m = manifest(8, [0.4, 0.8], 8);
    let val = manifest(4, [0.4, 0.4], 9);
    let cfg = TrainConfig { epochs: 2, fixed_frames: Some(10), seed: 3, ..Default::default() };
    let a = train(&m, Some(&val), &cfg, None, &mut |_| {}).unwrap();
    let b = train(&m, Some(&val), &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.trainer.model.store.fingerprint(), b.trainer.model.store.fingerprint());
    let other = train(&m, Some(&val), &TrainConfig { seed: 4, ..cfg }, None, &mut |_| {}).unwrap();
    assert_ne!(a.report.epochs[0].loss, other.report.epochs[0].loss);
}

#[test]
fn checkpoints_round_trip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(4, [0.4, 0.4], 10);
    let val = manifest(4, [0.4, 0.4], 11);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
    let out = train(&m, Some(&val), &cfg, Some(dir.path()), &mut |_| {}).unwrap();

    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        for key in ["loss", "val_map", "lr"] {
            assert!(l[key].is_number(), "{key}");
        }
    }

    let (reloaded, meta) = Trainer::load_checkpoint(dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(meta.epoch, 2);
    assert_eq!(meta.config_hash, cfg.hash());
    assert_eq!(reloaded.adam, out.trainer.adam);
    assert_eq!(reloaded.model.store.fingerprint(), out.trainer.model.store.fingerprint());
    let clip = val.clip(0).unwrap();
    assert_eq!(predict_clip(&reloaded.model, &clip).unwrap(), predict_clip(&out.trainer.model, &clip).unwrap());

    let best = load_model(dir.path().join(BEST_CHECKPOINT)).unwrap();
    let opts = ScoreOptions { noise_snr_db: None, batch_size: 3 };
    assert_eq!(score_manifest(&best, &val, &opts).unwrap(), score_manifest(&out.best, &val, &opts).unwrap());
}

#[test]
fn batched_scoring_matches_single_clips() {
    let val = manifest(5, [0.4, 0.4], 12);
    let t = Trainer::new(TrainConfig::default()).unwrap();
    let rows = score_manifest(&t.model, &val, &ScoreOptions { noise_snr_db: None, batch_size: 5 }).unwrap();
    for (i, spec) in val.clips.iter().enumerate() {
        let single = predict_clip(&t.model, &val.clip(i).unwrap()).unwrap();
        let got: Vec<f64> = rows.iter().filter(|r| r.clip_id == spec.clip_id).map(|r| r.score).collect();
        for (a, b) in got.iter().zip(&single) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}

#[test]
fn empty_manifest_is_rejected() {
    let empty = Manifest::in_memory(Vec::new(), RenderOptions::default(), 0);
    assert!(matches!(train(&empty, None, &TrainConfig::default(), None, &mut |_| {}), Err(AsdError::InvalidArgument(_))));
}

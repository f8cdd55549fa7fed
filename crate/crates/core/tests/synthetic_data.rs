use asd_core::synthetic_data::{
    annotation_rows, build_dataset, plan_dataset, render_clip, sample_openness, Condition, ConditionMix, Manifest,
    RenderOptions, ANNOTATION_FILE, NOT_SPEAKING, SPEAKING,
};
use asd_core::AsdError;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// RMS of the audio samples falling in each video frame.
fn frame_rms(samples: &[f32], frames: usize) -> Vec<f64> {
    let per = samples.len() / frames;
    samples
        .chunks(per)
        .take(frames)
        .map(|c| (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect()
}

#[test]
fn openness_trajectories() {
    let one = sample_openness(1, 3).unwrap();
    assert_eq!(one.len(), 1);
    assert!((0.0..=1.0).contains(&one[0]));
    assert_eq!(sample_openness(100, 7).unwrap(), sample_openness(100, 7).unwrap());
    assert!(sample_openness(0, 7).is_err());
    for seed in 0..20 {
        let o = sample_openness(100, seed).unwrap();
        assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
        let r1 = pearson(&o[..99], &o[1..]);
        assert!(r1 > 0.8, "seed {seed}: lag-1 autocorrelation {r1}");
    }
}

#[test]
fn labels_follow_the_condition_table() {
    let expected = [(1u8, true, true, Some(true), 1u8), (2, true, true, Some(false), 0), (3, true, false, None, 0), (4, false, true, None, 0), (5, false, false, None, 0)];
    for (i, audio, lips, sync, label) in expected {
        let c = Condition::try_from(i).unwrap();
        assert_eq!((c.audio_active(), c.lips_moving(), c.synchronized(), c.label()), (audio, lips, sync, label));
        let clip = render_clip(c, 10, 25.0, 16_000, 42).unwrap();
        assert_eq!(clip.labels, vec![label; 10]);
        assert_eq!(clip.faces.len(), 10);
        assert_eq!(clip.audio.len(), 10 * 640);
    }
    assert!(matches!(Condition::try_from(0), Err(AsdError::InvalidArgument(_))));
    assert!(matches!(Condition::try_from(6), Err(AsdError::InvalidArgument(_))));
}

#[test]
fn silent_conditions_are_silent_and_still_lips_are_still() {
    for c in [Condition::Silent, Condition::SilentStill] {
        let clip = render_clip(c, 30, 25.0, 16_000, 5).unwrap();
        let rms = frame_rms(clip.audio.samples(), 30).iter().cloned().fold(0.0, f64::max);
        assert!(rms < 1e-6);
    }
    for c in [Condition::StillLips, Condition::SilentStill] {
        let clip = render_clip(c, 6, 25.0, 16_000, 6).unwrap();
        let frame = 112 * 112;
        let d = clip.faces.frames.data();
        for t in 1..6 {
            assert_eq!(&d[..frame], &d[t * frame..(t + 1) * frame]);
        }
    }
}

#[test]
fn sync_correlates_and_unsync_does_not() {
    let (mut sync, mut unsync, mut unsync_abs) = (0.0, 0.0, 0.0);
    for seed in 0..100 {
        let a = render_clip(Condition::Sync, 50, 25.0, 16_000, seed).unwrap();
        let b = render_clip(Condition::Unsync, 50, 25.0, 16_000, seed).unwrap();
        sync += pearson(&frame_rms(a.audio.samples(), 50), &a.openness);
        let r = pearson(&frame_rms(b.audio.samples(), 50), &b.openness);
        unsync += r;
        unsync_abs += r.abs();
    }
    let (sync, unsync, unsync_abs) = (sync / 100.0, unsync / 100.0, unsync_abs / 100.0);
    assert!(sync > 0.9, "sync {sync}");
    assert!(unsync < 0.3 && unsync_abs < 0.3, "unsync {unsync} (|r| {unsync_abs})");
}

#[test]
fn sync_and_unsync_share_each_marginal() {
    // the frames are drawn identically; only the audio trajectory differs
    let mut rms = [0.0f64; 2];
    for seed in 0..100 {
        let a = render_clip(Condition::Sync, 40, 25.0, 16_000, seed).unwrap();
        let b = render_clip(Condition::Unsync, 40, 25.0, 16_000, seed).unwrap();
        assert_eq!(a.faces, b.faces);
        for (k, clip) in [a, b].iter().enumerate() {
            let s = clip.audio.samples();
            rms[k] += (s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt() / 100.0;
        }
    }
    assert!((rms[0] / rms[1] - 1.0).abs() < 0.05, "{rms:?}");
}

#[test]
fn mouth_height_tracks_openness() {
    let clip = render_clip(Condition::Sync, 20, 25.0, 16_000, 9).unwrap();
    // darkness summed down the mouth's central column
    let d = clip.faces.frames.data();
    let column: Vec<f64> = (0..20)
        .map(|t| (60..105).map(|y| 1.0 - d[t * 112 * 112 + y * 112 + 56] as f64).sum())
        .collect();
    assert!(pearson(&column, &clip.openness) > 0.99);
}

#[test]
fn lagged_sync_shifts_the_envelope() {
    let spec = &plan_dataset(1, &"1:1".parse().unwrap(), [1.0, 1.0], 25.0, 0).unwrap()[0];
    let opts = RenderOptions { sync_lag_frames: 3, ..Default::default() };
    let clip = spec.render(&opts).unwrap();
    assert_eq!(&clip.envelope[3..], &clip.openness[..clip.len() - 3]);
}

#[test]
fn mix_parsing_and_allocation() {
    let mix: ConditionMix = "1:0.5, 2:0.5".parse().unwrap();
    assert_eq!(mix.counts(7), vec![(Condition::Sync, 4), (Condition::Unsync, 3)]);
    assert!("1:0.5".parse::<ConditionMix>().is_err());
    assert!("7:1.0".parse::<ConditionMix>().is_err());
    assert!("1-1.0".parse::<ConditionMix>().is_err());
    let mix: ConditionMix = "1:0.2,2:0.2,3:0.2,4:0.2,5:0.2".parse().unwrap();
    assert_eq!(mix.counts(10).iter().map(|c| c.1).sum::<usize>(), 10);
}

#[test]
fn planned_datasets() {
    let half: ConditionMix = "1:0.5,2:0.5".parse().unwrap();
    let specs = plan_dataset(200, &half, [1.0, 6.0], 25.0, 11).unwrap();
    let m = Manifest::in_memory(specs, RenderOptions::default(), 11);
    assert_eq!(m.len(), 200);
    assert!((m.speaking_fraction() - 0.5).abs() <= 0.05, "{}", m.speaking_fraction());
    assert!(m.clips.iter().all(|c| (25..=150).contains(&c.frames)));

    let fixed = plan_dataset(12, &half, [2.0, 2.0], 25.0, 12).unwrap();
    assert!(fixed.iter().all(|c| c.frames == 50));
    assert!(plan_dataset(3, &half, [2.0, 1.0], 25.0, 0).is_err());

    let rows: Vec<_> = fixed.iter().flat_map(|s| annotation_rows(s, 25.0)).collect();
    assert_eq!(rows.len(), fixed.iter().map(|s| 50 * s.boxes.len()).sum::<usize>());
    for r in &rows {
        assert!(r.x1 < r.x2 && r.y1 < r.y2 && r.x2 <= 1.0 && r.y2 <= 1.0);
        let primary = r.track_id.ends_with(":0");
        let spec = fixed.iter().find(|s| s.clip_id == r.clip_id).unwrap();
        let want = if primary && spec.label() == 1 { SPEAKING } else { NOT_SPEAKING };
        assert_eq!(r.label, want);
    }
}

#[test]
fn dataset_on_disk_round_trips_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mix: ConditionMix = "1:1.0".parse().unwrap();
    let ma = build_dataset(10, &mix, [0.2, 0.4], a.path(), 3).unwrap();
    let mb = build_dataset(10, &mix, [0.2, 0.4], b.path(), 3).unwrap();
    assert_eq!(ma.len(), 10);
    assert!(ma.clips.iter().all(|c| c.label() == 1));
    assert_eq!(ma.hash(), mb.hash());
    assert_eq!(
        std::fs::read(a.path().join(ANNOTATION_FILE)).unwrap(),
        std::fs::read(b.path().join(ANNOTATION_FILE)).unwrap()
    );

    let loaded = Manifest::load(a.path()).unwrap();
    assert_eq!(loaded.clips, ma.clips);
    for i in [0, 9] {
        let disk = loaded.clip(i).unwrap();
        let fresh = ma.clips[i].render(&ma.render).unwrap();
        assert_eq!(disk.faces, fresh.faces);
        assert_eq!(disk.labels, fresh.labels);
        // 16-bit PCM
        let worst = disk.audio.samples().iter().zip(fresh.audio.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 1.0 / 32767.0, "{worst}");
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let mix: ConditionMix = "1:1.0".parse().unwrap();
    assert!(matches!(build_dataset(1, &mix, [0.2, 0.2], &file, 0), Err(AsdError::Io { .. })));
}

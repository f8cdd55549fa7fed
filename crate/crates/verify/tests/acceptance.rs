//! Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
//! stderr. `ASD_ACCEPTANCE=4,5` runs a subset; the others print SKIP.

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use asd_cli::ablation::{run_ablation, AblationPlan, AblationReport, AugMode, Frames, Variant};
use asd_cli::app::run_args;
use asd_cli::grad_check_sweep;
use asd_core::attention_fusion::Drop;
use asd_core::audio_features::{extract_mfcc, Waveform};
use asd_core::augmentation::AugmentationPlan;
use asd_core::classifier::frame_cross_entropy;
use asd_core::evaluation::{average_precision, f1_score, ScoredFrame};
use asd_core::model::{AsdModel, ModelConfig};
use asd_core::nn::Ctx;
use asd_core::synthetic_data::{plan_dataset, render_clip, Condition, ConditionMix, Manifest, RenderOptions};
use asd_core::trainer::{train, TrainConfig};
use asd_core::visual_encoder::FACE_SIZE;
use asd_core::{Float, Scale};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn within(budget: Duration, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (e <= budget, format!("{:.1} s of {} s budget", e.as_secs_f64(), budget.as_secs()))
}

fn precision_name() -> &'static str {
    if std::mem::size_of::<Float>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Verdict> {
    let start = Instant::now();
    let sweep = grad_check_sweep(10, 1e-3 as Float, 1e-2, 6)?;
    eprintln!("{}", sweep.render());
    let failed: Vec<String> = sweep
        .lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| format!("{} {:.2e}", l.name, l.max_relative_error))
        .collect();
    let (fast, time) = within(Duration::from_secs(60), start);
    let detail = if failed.is_empty() {
        format!("{} checks below 1e-2 in {}; {time}", sweep.lines.len(), precision_name())
    } else {
        format!(
            "{}/{} checks at or above 1e-2 in {}: {}; {time}",
            failed.len(),
            sweep.lines.len(),
            precision_name(),
            failed.join(", ")
        )
    };
    verdict(failed.is_empty() && fast, detail)
}

// ---------------------------------------------------------------- 2

fn cli_output(args: &[&str]) -> Result<String> {
    let mut buf = Vec::new();
    run_args(std::iter::once("asd").chain(args.iter().copied()), &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn receptive_fields() -> Result<Verdict> {
    let start = Instant::now();
    let paper = cli_output(&["rf-report", "--scale", "paper"])?;
    let visual = paper.lines().any(|l| l == "visual: 21 frames / 840 ms (at 25 fps)");
    let audio = paper.lines().any(|l| l == "audio: 189 frames / 1890 ms (MFCC hop 10 ms)");
    // the empirical run errors out if the perturbation support differs
    let desk = cli_output(&["rf-report", "--scale", "desk", "--empirical"]);
    let empirical = desk.as_ref().map(|s| s.contains("equal the analytic windows")).unwrap_or(false);
    let (fast, time) = within(Duration::from_secs(60), start);
    let detail = format!(
        "paper visual line {}, audio line {}, desk empirical {}; {time}",
        if visual { "ok" } else { "wrong" },
        if audio { "ok" } else { "wrong" },
        match &desk {
            Ok(_) if empirical => "matches".to_string(),
            Ok(_) => "missing".to_string(),
            Err(e) => format!("error: {e:#}"),
        }
    );
    verdict(visual && audio && empirical && fast, detail)
}

// ---------------------------------------------------------------- 3

fn alignment() -> Result<Verdict> {
    let start = Instant::now();
    let model = AsdModel::new(ModelConfig::for_scale(Scale::Desk), 0);
    let mut bad = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..50 {
        let secs = 1.0 + 9.0 * k as f64 / 49.0;
        let t = (secs * 25.0).round() as usize;
        let clip = render_clip(Condition::Sync, t, 25.0, 16_000, k)?;
        // containers rarely agree to the sample: trim or pad the track
        let n = ((secs * 16_000.0) as i64 + rng.random_range(-400..400)).max(160) as usize;
        let mut samples = clip.audio.samples().to_vec();
        samples.resize(n, 0.0);
        let wave = Waveform::new(samples, 16_000)?;
        let mfcc = extract_mfcc(&wave, t)?;
        let mut ctx = Ctx::eval(&model.store);
        let faces = ctx.input(clip.faces.frames.clone().reshape(vec![1, 1, t, FACE_SIZE, FACE_SIZE])?);
        let m = ctx.input(mfcc.frames.clone().reshape(vec![1, 4 * t, 13])?);
        let out = model.net.forward(&mut ctx, faces, m)?;
        let (fa, fv) = (ctx.g.shape(out.audio).to_vec(), ctx.g.shape(out.visual).to_vec());
        if fa[1] != t || fv[1] != t || ctx.g.shape(out.probs) != [1, t] {
            bad.push(format!("{secs:.2}s: T={t} F_a={fa:?} F_v={fv:?}"));
        }
    }
    let (fast, time) = within(Duration::from_secs(120), start);
    let detail = if bad.is_empty() {
        format!("50 durations 1-10 s, len(F_a) == len(F_v) == T for all; {time}")
    } else {
        format!("{} mismatches: {}; {time}", bad.len(), bad.join("; "))
    };
    verdict(bad.is_empty() && fast, detail)
}

// ---------------------------------------------------------------- 4

/// AP straight from its definition: the mean, over positives, of the
/// precision among all frames scored at least as high.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    pos.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut sum = 0.0;
    for &i in &pos {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
        let hits = above.iter().filter(|&&j| labels[j] == 1).count();
        sum += hits as f64 / above.len() as f64;
    }
    sum / pos.len() as f64
}

fn frames(scores: &[f64], labels: &[u8]) -> Vec<ScoredFrame> {
    scores.iter().zip(labels).enumerate().map(|(i, (&s, &y))| ScoredFrame::new("c", i, s, y)).collect()
}

fn metrics() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut scores: Vec<f64> = (0..8).map(|i| 0.05 + 0.1 * i as f64).collect();
    scores.shuffle(&mut rng);
    let mut ap_mismatch = 0;
    for mask in 1u32..256 {
        let labels: Vec<u8> = (0..8).map(|b| ((mask >> b) & 1) as u8).collect();
        if average_precision(&frames(&scores, &labels))? != brute_force_ap(&scores, &labels) {
            ap_mismatch += 1;
        }
    }
    let all_negative_rejected = average_precision(&frames(&scores, &[0; 8])).is_err();

    let worked = average_precision(&frames(&[0.9, 0.8, 0.7], &[1, 0, 1]))?;
    let worked_ok = (worked - 5.0 / 6.0).abs() <= 1e-9 && format!("{worked:.4}") == "0.8333";

    let mut f1_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let th = rng.random::<f64>();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&si, &yi) in s.iter().zip(&y) {
            match (si >= th, yi == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let oracle = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        if (f1_score(&frames(&s, &y), th)? - oracle).abs() > 1e-12 {
            f1_mismatch += 1;
        }
    }
    let (fast, time) = within(Duration::from_secs(60), start);
    verdict(
        ap_mismatch == 0 && all_negative_rejected && worked_ok && f1_mismatch == 0 && fast,
        format!(
            "AP != brute force on {ap_mismatch}/255 labelings (all-negative rejected: {all_negative_rejected}); \
             worked example {worked:.10}; F1 != oracle on {f1_mismatch}/1000; {time}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn loss() -> Result<Verdict> {
    let half = frame_cross_entropy(&[0.5; 9], &[1, 0, 0, 1, 1, 0, 1, 0, 1])?;
    let worked = frame_cross_entropy(&[0.9, 0.2], &[1, 0])?;
    let closed = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    let ok = (half - 2f64.ln()).abs() <= 1e-6 && (worked - closed).abs() <= 1e-6 && format!("{worked:.4}") == "0.1643";
    verdict(
        ok,
        format!(
            "s=0.5: {half:.9} (ln 2 = {:.9}); worked case {worked:.9} (closed form {closed:.9})",
            2f64.ln()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn split_plan(n_train: usize, n_val: usize, duration: [f64; 2], seed: u64) -> Result<(Manifest, Manifest)> {
    let mix: ConditionMix = "1:0.5,2:0.5".parse()?;
    let render = RenderOptions::default();
    let specs = plan_dataset(n_train + n_val, &mix, duration, render.fps, seed)?;
    let (tr, va) = specs.split_at(n_train);
    Ok((
        Manifest::in_memory(tr.to_vec(), render, seed),
        Manifest::in_memory(va.to_vec(), render, seed),
    ))
}

fn learnability() -> Result<Verdict> {
    let start = Instant::now();
    let (tr, va) = split_plan(2000, 400, [1.0, 3.0], 6)?;
    let cfg = TrainConfig {
        epochs: 20,
        model_scale: Scale::Desk,
        fixed_frames: Some(25),
        augmentation: AugmentationPlan::none(),
        target_map: Some(0.9),
        ..TrainConfig::default()
    };
    let out = train(&tr, Some(&va), &cfg, None, &mut |m| {
        eprintln!(
            "  [6] epoch {} loss {:.4} val mAP {:.4} ({:.0} s)",
            m.epoch,
            m.loss,
            m.val_map.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    let best = out.report.best_val_map.context("no validation mAP recorded")?;
    let (fast, time) = within(Duration::from_secs(20 * 60), start);
    verdict(
        best >= 0.90 && fast,
        format!(
            "best held-out mAP {best:.4} at epoch {} ({} epochs run, 2000 train / 400 val clips); {time}",
            out.report.best_epoch.unwrap_or(0),
            out.report.epochs.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn ablation_base(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        model_scale: Scale::Desk,
        fixed_frames: Some(25),
        augmentation: AugmentationPlan::none(),
        ..TrainConfig::default()
    }
}

fn ablate(name: &str, plan: &AblationPlan, tr: &Manifest, va: &Manifest) -> Result<AblationReport> {
    run_ablation(plan, tr, va, &mut |r| {
        let noisy = r.noisy_map.map_or(String::new(), |m| format!(" noisy mAP {m:.4}"));
        eprintln!("  [7{name}] {} seed {} mAP {:.4}{noisy}", r.label, r.seed, r.map);
    })
}

fn mean_of(report: &AblationReport, drop: Drop, aug: AugMode, frames: Option<usize>, noisy: bool) -> Result<f64> {
    let v = Variant {
        drop,
        aug,
        frames: Frames(frames),
    };
    let s = report.summary_for(&v).with_context(|| format!("no row for {}", v.label()))?;
    if noisy {
        s.mean_noisy_map.context("no noisy evaluation")
    } else {
        Ok(s.mean_map)
    }
}

fn ablations() -> Result<Verdict> {
    let start = Instant::now();
    let (tr, va) = split_plan(400, 100, [2.0, 3.0], 0)?;
    let seeds = vec![0, 1, 2];
    let plan = |base, drops, augs, frames: Vec<Option<usize>>, snr| AblationPlan {
        base,
        drops,
        augs,
        frames: frames.into_iter().map(Frames).collect(),
        seeds: seeds.clone(),
        noise_dir: None,
        noisy_eval_snr_db: snr,
    };

    let a = ablate(
        "a",
        &plan(ablation_base(4), vec![Drop::None, Drop::Cross, Drop::Both], vec![AugMode::None], vec![Some(25)], None),
        &tr,
        &va,
    )?;
    let full = mean_of(&a, Drop::None, AugMode::None, Some(25), false)?;
    let cross = mean_of(&a, Drop::Cross, AugMode::None, Some(25), false)?;
    let both = mean_of(&a, Drop::Both, AugMode::None, Some(25), false)?;
    let ok_a = full >= cross && cross >= both;

    let b = ablate(
        "b",
        &plan(ablation_base(4), vec![Drop::None], vec![AugMode::None], vec![Some(5), Some(50)], None),
        &tr,
        &va,
    )?;
    let f5 = mean_of(&b, Drop::None, AugMode::None, Some(5), false)?;
    let f50 = mean_of(&b, Drop::None, AugMode::None, Some(50), false)?;
    let ok_b = f50 > f5;

    let c = ablate(
        "c",
        &plan(ablation_base(8), vec![Drop::None], vec![AugMode::Neg, AugMode::None], vec![Some(25)], Some(0.0)),
        &tr,
        &va,
    )?;
    let neg = mean_of(&c, Drop::None, AugMode::Neg, Some(25), true)?;
    let none = mean_of(&c, Drop::None, AugMode::None, Some(25), true)?;
    let ok_c = neg >= none;

    let mark = |ok: bool| if ok { "holds" } else { "violated" };
    let (fast, time) = within(Duration::from_secs(90 * 60), start);
    verdict(
        ok_a && ok_b && ok_c && fast,
        format!(
            "(a) full {full:.4} >= w/o cross {cross:.4} >= w/o both {both:.4} {}; \
             (b) frames=50 {f50:.4} > frames=5 {f5:.4} {}; \
             (c) noisy (0 dB) neg {neg:.4} >= none {none:.4} {}; means over 3 seeds; {time}",
            mark(ok_a),
            mark(ok_b),
            mark(ok_c)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn pipeline(root: &Path) -> Result<()> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let run = |args: &[&str]| cli_output(args).map(|_| ());
    run(&["gen-data", "--n", "6", "--duration", "1,2", "--out", &p("tr"), "--seed", "11"])?;
    run(&["gen-data", "--n", "4", "--duration", "1,2", "--out", &p("va"), "--seed", "12"])?;
    run(&[
        "train", "--data", &p("tr"), "--val", &p("va"), "--out", &p("run"), "--epochs", "2", "--frames", "10", "--aug", "neg",
        "--scale", "desk", "--seed", "3",
    ])?;
    run(&["infer", "--checkpoint", &p("run"), "--data", &p("va"), "--out", &p("scores.csv")])?;
    run(&[
        "eval", "--scores", &p("scores.csv"), "--annotations", &p("va/annotations.csv"), "--out", &p("metrics.json"),
    ])?;
    Ok(())
}

fn determinism() -> Result<Verdict> {
    let start = Instant::now();
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        pipeline(d.path())?;
    }
    let files = ["metrics.json", "scores.csv", "run/metrics.jsonl", "run/report.json", "run/artifacts.json"];
    let mut differing = Vec::new();
    for f in files {
        if fs::read(dirs[0].path().join(f))? != fs::read(dirs[1].path().join(f))? {
            differing.push(f);
        }
    }
    let detail = if differing.is_empty() {
        format!(
            "gen-data/train/infer/eval run twice: {} identical byte for byte (checkpoint hashes included); {:.1} s",
            files.join(", "),
            start.elapsed().as_secs_f64()
        )
    } else {
        format!("differing outputs: {}", differing.join(", "))
    };
    verdict(differing.is_empty(), detail)
}

// ----------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient correctness", gradients),
    (2, "receptive-field fidelity", receptive_fields),
    (3, "audio/visual alignment", alignment),
    (4, "metric oracle equivalence", metrics),
    (5, "loss closed forms", loss),
    (6, "desk-scale learnability", learnability),
    (7, "directional ablations", ablations),
    (8, "determinism", determinism),
];

fn main() -> ExitCode {
    let only: Option<HashSet<u32>> = std::env::var("ASD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failures = 0;
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n}: SKIP {name}");
            continue;
        }
        eprintln!("criterion {n}: running {name}");
        let result = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict {
                passed: false,
                detail: format!("error: {e:#}"),
            },
            Err(_) => Verdict {
                passed: false,
                detail: "panicked".into(),
            },
        };
        if !result.passed {
            failures += 1;
        }
        println!("criterion {n}: {} {name}: {}", if result.passed { "PASS" } else { "FAIL" }, result.detail);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}

//! Plumbing shared by the `asd` binary and its acceptance suite: config
//! resolution, run-directory artifact manifests, the receptive-field
//! report, the gradient sweep and ablation runs.

pub mod ablation;
pub mod app;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use asd_core::audio_encoder::AudioEncoderConfig;
use asd_core::model::{audio_perturbation_support, fusion_path_grad_check, visual_perturbation_support};
use asd_core::numeric::registry::{check_case, registered_ops};
use asd_core::numeric::receptive_window;
use asd_core::visual_encoder::VisualEncoderConfig;
use asd_core::{Float, Scale};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Marks errors that should exit with the usage code (2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reads a JSON config, or the defaults without a path. Unknown keys are
/// rejected by the config types themselves.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

/// Prints the resolved configuration so the run can be repeated verbatim.
pub fn echo_config(out: &mut dyn Write, command: &str, config: &impl Serialize, seed: u64) -> Result<()> {
    writeln!(out, "command: {command}")?;
    writeln!(out, "seed: {seed}")?;
    writeln!(out, "resolved config:\n{}", serde_json::to_string_pretty(config)?)?;
    Ok(())
}

pub const ARTIFACTS_FILE: &str = "artifacts.json";

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != ARTIFACTS_FILE) {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

/// Writes `artifacts.json`: every file under `dir` with its size and
/// SHA-256, sorted by path, plus the command and resolved config.
pub fn write_artifact_manifest(dir: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let artifacts: Vec<Artifact> = files
        .iter()
        .map(|rel| -> Result<Artifact> {
            let bytes = fs::read(dir.join(rel))?;
            Ok(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    let doc = serde_json::json!({ "command": command, "config": config, "files": artifacts });
    fs::write(dir.join(ARTIFACTS_FILE), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub const VIDEO_FPS: f64 = 25.0;
pub const MFCC_HOP_MS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RfReport {
    pub scale: Scale,
    pub visual_frames: usize,
    pub visual_ms: f64,
    pub audio_frames: usize,
    pub audio_ms: f64,
    /// Output frames reached by perturbing one interior input frame, when
    /// measured.
    pub visual_empirical: Option<usize>,
    /// Video-rate output frames reached by perturbing one interior MFCC row.
    pub audio_empirical: Option<usize>,
}

/// Analytic receptive fields; with `empirical`, also the perturbation
/// support of randomly initialized encoders at an interior position.
pub fn rf_report(scale: Scale, empirical: bool) -> Result<RfReport> {
    let v = VisualEncoderConfig::for_scale(scale);
    let a = AudioEncoderConfig::for_scale(scale);
    let (vf, af) = (v.receptive_field(), a.receptive_field());
    let (mut visual_empirical, mut audio_empirical) = (None, None);
    if empirical {
        let t = vf + 10;
        let frame = t / 2;
        let got = visual_perturbation_support(&v, t, frame, &[1, 2])?;
        let want: Vec<usize> = receptive_window(&v.temporal_specs()).outputs_touching(frame, t).collect();
        anyhow::ensure!(got == want, "visual support {got:?} differs from the analytic window {want:?}");
        visual_empirical = Some(got.len());

        // one MFCC row reaches every video frame whose window covers it
        let w = receptive_window(&a.temporal_specs());
        let t = af.div_ceil(w.jump) + 10;
        let row = 2 * t;
        let got = audio_perturbation_support(&a, t, row, &[1, 2, 3])?;
        let want: Vec<usize> = w.outputs_touching(row, t).collect();
        anyhow::ensure!(got == want, "audio support {got:?} differs from the analytic window {want:?}");
        audio_empirical = Some(got.len());
    }
    Ok(RfReport {
        scale,
        visual_frames: vf,
        visual_ms: vf as f64 * 1000.0 / VIDEO_FPS,
        audio_frames: af,
        audio_ms: af as f64 * MFCC_HOP_MS,
        visual_empirical,
        audio_empirical,
    })
}

impl std::fmt::Display for RfReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let scale = match self.scale {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        };
        writeln!(f, "receptive fields ({scale} scale)")?;
        writeln!(
            f,
            "visual: {} frames / {:.0} ms (at {VIDEO_FPS} fps)",
            self.visual_frames, self.visual_ms
        )?;
        write!(
            f,
            "audio: {} frames / {:.0} ms (MFCC hop {MFCC_HOP_MS} ms)",
            self.audio_frames, self.audio_ms
        )?;
        if let (Some(v), Some(a)) = (self.visual_empirical, self.audio_empirical) {
            write!(
                f,
                "\nempirical (random init): one video frame reaches {v} outputs; one MFCC row reaches {a} outputs; both equal the analytic windows"
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSweep {
    pub eps: f64,
    pub tolerance: f64,
    pub seeds: u64,
    pub lines: Vec<GradCheckLine>,
    pub seconds: f64,
}

impl GradSweep {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{:<28} max rel err {:.3e} (seed {:>2}) {:>6.1} s  {}",
                l.name,
                l.max_relative_error,
                l.worst_seed,
                l.seconds,
                if l.passed { "ok" } else { "FAIL" }
            );
        }
        let failed = self.lines.iter().filter(|l| !l.passed).count();
        let _ = write!(
            s,
            "{} checks, {failed} failed, eps {:e}, tolerance {:e}, {:.1} s",
            self.lines.len(),
            self.eps,
            self.tolerance,
            self.seconds
        );
        s
    }
}

/// Every registered op and the fusion + classifier path (T cycling through
/// `1..=max_t`) on `seeds` random instances each.
pub fn grad_check_sweep(seeds: u64, eps: Float, tolerance: f64, max_t: usize) -> Result<GradSweep> {
    anyhow::ensure!(max_t >= 1, "max_t must be at least 1");
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut record = |name: String, errs: Vec<(u64, f64)>, since: Instant| {
        let (worst_seed, max) = errs.into_iter().fold((0, 0.0), |b, e| if e.1 > b.1 { e } else { b });
        lines.push(GradCheckLine {
            name,
            max_relative_error: max,
            worst_seed,
            passed: max < tolerance,
            seconds: since.elapsed().as_secs_f64(),
        });
    };
    for case in registered_ops() {
        let since = Instant::now();
        let errs = (0..seeds)
            .map(|s| Ok((s, check_case(&case, s, eps)?.max_relative_error)))
            .collect::<Result<Vec<_>>>()?;
        record(case.name.to_string(), errs, since);
    }
    let since = Instant::now();
    let errs = (0..seeds)
        .map(|s| {
            let t = 1 + s as usize % max_t;
            Ok((s, fusion_path_grad_check(s, t, eps)?.max_relative_error))
        })
        .collect::<Result<Vec<_>>>()?;
    record(format!("fusion+classifier (T<={max_t})"), errs, since);
    Ok(GradSweep {
        eps: eps as f64,
        tolerance,
        seeds,
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

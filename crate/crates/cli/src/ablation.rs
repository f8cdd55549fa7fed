//! Train-and-evaluate sweeps over disabled components, augmentation modes
//! and crop lengths, averaged over seeds.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use asd_core::attention_fusion::Drop;
use asd_core::synthetic_data::Manifest;
use asd_core::trainer::{manifest_map, train, ScoreOptions, TrainConfig, FIXED_FRAME_CHOICES};
use serde::{Deserialize, Serialize};

use crate::usage;

/// Audio augmentation during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    /// Another clip of the same batch as interference.
    Neg,
    /// WAV files from a noise directory.
    Noise,
    None,
}

impl FromStr for AugMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "neg" => Ok(AugMode::Neg),
            "noise" => Ok(AugMode::Noise),
            "none" => Ok(AugMode::None),
            other => Err(format!("unknown augmentation `{other}` (neg|noise|none)")),
        }
    }
}

/// `N` frames per training crop, or whole clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frames(pub Option<usize>);

impl FromStr for Frames {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "variable" {
            return Ok(Frames(None));
        }
        let n: usize = s.parse().map_err(|_| format!("frames must be a number or `variable`, got `{s}`"))?;
        if !FIXED_FRAME_CHOICES.contains(&n) {
            return Err(format!("frames {n} not one of {FIXED_FRAME_CHOICES:?}"));
        }
        Ok(Frames(Some(n)))
    }
}

impl std::fmt::Display for Frames {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(n) => write!(f, "{n}"),
            None => write!(f, "variable"),
        }
    }
}

fn drop_name(d: Drop) -> &'static str {
    match d {
        Drop::None => "none",
        Drop::Cross => "cross",
        Drop::SelfAttn => "self",
        Drop::Both => "both",
    }
}

fn aug_name(a: AugMode) -> &'static str {
    match a {
        AugMode::Neg => "neg",
        AugMode::Noise => "noise",
        AugMode::None => "none",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub drop: Drop,
    pub aug: AugMode,
    pub frames: Frames,
}

impl Variant {
    pub fn label(&self) -> String {
        format!("drop={} aug={} frames={}", drop_name(self.drop), aug_name(self.aug), self.frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    /// Everything the variants do not override (visual augmentation,
    /// learning rate, epochs, ...).
    pub base: TrainConfig,
    pub drops: Vec<Drop>,
    pub augs: Vec<AugMode>,
    pub frames: Vec<Frames>,
    pub seeds: Vec<u64>,
    pub noise_dir: Option<PathBuf>,
    /// Also score the validation set with another clip's audio mixed in at
    /// this SNR.
    pub noisy_eval_snr_db: Option<f64>,
}

impl AblationPlan {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &drop in &self.drops {
            for &aug in &self.augs {
                for &frames in &self.frames {
                    out.push(Variant { drop, aug, frames });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.drops.is_empty() || self.augs.is_empty() || self.frames.is_empty() || self.seeds.is_empty() {
            return Err(usage("ablate needs at least one drop, aug, frames and seed value"));
        }
        if self.augs.contains(&AugMode::Noise) && self.noise_dir.is_none() {
            return Err(usage("--aug noise needs --noise-dir"));
        }
        if self.noise_dir.is_some() && !self.augs.contains(&AugMode::Noise) {
            return Err(usage("--noise-dir is only used with --aug noise"));
        }
        for v in self.variants() {
            self.config_for(&v, self.seeds[0]).validate().map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn config_for(&self, v: &Variant, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.drop = v.drop;
        cfg.fixed_frames = v.frames.0;
        cfg.augmentation.neg_sampling = v.aug == AugMode::Neg;
        cfg.augmentation.noise_dir = match v.aug {
            AugMode::Noise => self.noise_dir.clone(),
            _ => None,
        };
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub label: String,
    pub seed: u64,
    pub final_loss: f64,
    pub map: f64,
    pub noisy_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub label: String,
    pub mean_map: f64,
    pub mean_noisy_map: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary_for(&self, v: &Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == *v)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>5} {:>9} {:>11}", "variant", "runs", "mean mAP", "noisy mAP");
        for v in &self.summary {
            let noisy = v.mean_noisy_map.map_or("-".to_string(), |m| format!("{m:.4}"));
            let _ = writeln!(s, "{:<40} {:>5} {:>9.4} {:>11}", v.label, v.runs, v.mean_map, noisy);
        }
        s
    }
}

const EVAL_BATCH: usize = 8;

/// Trains every variant with every seed on `train` (no per-epoch
/// validation) and scores the final model on `val`.
pub fn run_ablation(
    plan: &AblationPlan,
    train_set: &Manifest,
    val: &Manifest,
    on_run: &mut dyn FnMut(&AblationRun),
) -> Result<AblationReport> {
    plan.validate()?;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for v in plan.variants() {
        let mut maps = Vec::new();
        let mut noisy = Vec::new();
        for &seed in &plan.seeds {
            let cfg = plan.config_for(&v, seed);
            let out = train(train_set, None, &cfg, None, &mut |_| {})?;
            let model = &out.trainer.model;
            let map = manifest_map(model, val, &ScoreOptions { noise_snr_db: None, batch_size: EVAL_BATCH })?;
            let noisy_map = match plan.noisy_eval_snr_db {
                Some(snr) => Some(manifest_map(model, val, &ScoreOptions { noise_snr_db: Some(snr), batch_size: EVAL_BATCH })?),
                None => None,
            };
            let run = AblationRun {
                variant: v,
                label: v.label(),
                seed,
                final_loss: out.report.epochs.last().map_or(f64::NAN, |e| e.loss),
                map,
                noisy_map,
            };
            on_run(&run);
            maps.push(map);
            noisy.extend(noisy_map);
            runs.push(run);
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        summary.push(VariantSummary {
            variant: v,
            label: v.label(),
            mean_map: mean(&maps),
            mean_noisy_map: (!noisy.is_empty()).then(|| mean(&noisy)),
            runs: maps.len(),
        });
    }
    Ok(AblationReport { runs, summary })
}

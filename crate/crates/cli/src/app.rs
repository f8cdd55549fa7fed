//! The `asd` command line: argument parsing and the command bodies. Every
//! command writes its report to a caller-supplied sink so the same code path
//! can be driven in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asd_core::attention_fusion::Drop;
use asd_core::augmentation::VisualPlan;
use asd_core::evaluation::{evaluate, join_annotations, read_annotations, read_scores, write_scores};
use asd_core::synthetic_data::{build_dataset, plan_dataset, Condition, ConditionMix, Manifest, RenderOptions, MANIFEST_FILE};
use asd_core::trainer::{load_model, score_manifest, train, ScoreOptions, TrainConfig, BEST_CHECKPOINT};
use asd_core::Scale;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ablation::{run_ablation, AblationPlan, AugMode, Frames};
use crate::{echo_config, grad_check_sweep, load_config, rf_report, usage, write_artifact_manifest, UsageError};

/// Audio-visual active speaker detection experiments.
#[derive(Parser)]
#[command(name = "asd", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with annotations and a manifest.
    GenData(GenDataArgs),
    /// Train a detector and keep the best and last checkpoints.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and write the score CSV.
    Infer(InferArgs),
    /// Turn a score CSV plus annotations into a metrics report.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
    /// Print the analytic receptive fields.
    RfReport(RfReportArgs),
    /// Train and evaluate variants with components disabled.
    Ablate(AblateArgs),
}

fn parse_duration(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| format!("bad duration `{s}` (seconds, or min,max)")))
        .collect::<Result<_, _>>()?;
    match nums[..] {
        [d] => Ok([d, d]),
        [a, b] => Ok([a, b]),
        _ => Err(format!("bad duration `{s}` (seconds, or min,max)")),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    n: usize,
    mix: String,
    duration: [f64; 2],
    out: PathBuf,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            n: 100,
            mix: "1:0.5,2:0.5".into(),
            duration: [1.0, 10.0],
            out: "data".into(),
            seed: 0,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with any of: n, mix, duration, out, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Condition fractions, e.g. `1:0.5,2:0.5`.
    #[arg(long)]
    mix: Option<String>,
    /// Clip length in seconds: `D` or `MIN,MAX`.
    #[arg(long, value_parser = parse_duration)]
    duration: Option<[f64; 2]>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn gen_data(args: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(args.config.as_deref())?;
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.mix = args.mix.unwrap_or(cfg.mix);
    cfg.duration = args.duration.unwrap_or(cfg.duration);
    cfg.out = args.out.unwrap_or(cfg.out);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    echo_config(out, "gen-data", &cfg, cfg.seed)?;
    let mix: ConditionMix = cfg.mix.parse().map_err(|e: asd_core::AsdError| usage(e.to_string()))?;
    let m = build_dataset(cfg.n, &mix, cfg.duration, &cfg.out, cfg.seed)?;
    for c in Condition::ALL {
        let k = m.clips.iter().filter(|s| s.condition == c).count();
        if k > 0 {
            writeln!(out, "condition {}: {k} clips", c.index())?;
        }
    }
    writeln!(out, "clips: {}", m.len())?;
    writeln!(out, "speaking fraction: {:.4}", m.speaking_fraction())?;
    writeln!(out, "manifest hash: {}", m.hash())?;
    writeln!(out, "manifest: {}", cfg.out.join(MANIFEST_FILE).display())?;
    Ok(())
}

/// Flags shared by `train` and `ablate` that override the JSON config.
#[derive(Args)]
struct TrainOverrides {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    scale: Option<Scale>,
    /// Stop once validation mAP reaches this value.
    #[arg(long)]
    target_map: Option<f64>,
    /// Disable flip / rotate / crop of the face tracks.
    #[arg(long)]
    no_visual_aug: bool,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = load_config(self.config.as_deref())?;
        cfg.lr0 = self.lr0.unwrap_or(cfg.lr0);
        cfg.lr_decay_per_epoch = self.lr_decay.unwrap_or(cfg.lr_decay_per_epoch);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.model_scale = self.scale.unwrap_or(cfg.model_scale);
        cfg.target_map = self.target_map.or(cfg.target_map);
        if self.no_visual_aug {
            cfg.augmentation.visual = VisualPlan::identity();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for per-epoch validation mAP.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drop: Option<Drop>,
    #[arg(long)]
    aug: Option<AugMode>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Training crop length, or `variable` for whole clips.
    #[arg(long)]
    frames: Option<Frames>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Serialize)]
struct TrainRun<'a> {
    data: &'a Path,
    val: Option<&'a Path>,
    out: &'a Path,
    train: &'a TrainConfig,
}

fn apply_aug(cfg: &mut TrainConfig, aug: AugMode, noise_dir: Option<PathBuf>) -> Result<()> {
    cfg.augmentation.neg_sampling = aug == AugMode::Neg;
    cfg.augmentation.noise_dir = match (aug, noise_dir) {
        (AugMode::Noise, Some(d)) => Some(d),
        (AugMode::Noise, None) => return Err(usage("--aug noise needs --noise-dir")),
        (_, Some(_)) => return Err(usage("--noise-dir is only used with --aug noise")),
        (_, None) => None,
    };
    Ok(())
}

fn train_cmd(args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.drop = args.drop.unwrap_or(cfg.drop);
    if let Some(f) = args.frames {
        cfg.fixed_frames = f.0;
    }
    if let Some(aug) = args.aug {
        apply_aug(&mut cfg, aug, args.noise_dir)?;
    } else if args.noise_dir.is_some() {
        return Err(usage("--noise-dir is only used with --aug noise"));
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    echo_config(
        out,
        "train",
        &TrainRun {
            data: &args.data,
            val: args.val.as_deref(),
            out: &args.out,
            train: &cfg,
        },
        cfg.seed,
    )?;
    let data = Manifest::load(&args.data)?;
    let val = args.val.as_ref().map(Manifest::load).transpose()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let outcome = train(&data, val.as_ref(), &cfg, Some(&args.out), &mut |m| {
        let val = m.val_map.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "epoch {:>3}  loss {:.5}  val_map {val}  lr {:.4e}", m.epoch, m.loss, m.lr);
    })?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    if let (Some(e), Some(m)) = (outcome.report.best_epoch, outcome.report.best_val_map) {
        writeln!(out, "best epoch {e}: val_map {m:.4}")?;
    }
    write_artifact_manifest(&args.out, "train", &cfg)?;
    writeln!(out, "run directory: {}", args.out.display())?;
    Ok(())
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint directory (a run's `best/` or `last/`), or a run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Mix the next clip's audio into each clip at this SNR.
    #[arg(long)]
    noise_snr: Option<f64>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Serialize)]
struct InferRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    out: &'a Path,
    options: ScoreOptions,
}

fn infer(args: InferArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = if args.checkpoint.join(BEST_CHECKPOINT).is_dir() {
        args.checkpoint.join(BEST_CHECKPOINT)
    } else {
        args.checkpoint.clone()
    };
    let options = ScoreOptions {
        noise_snr_db: args.noise_snr,
        batch_size: args.batch_size,
    };
    echo_config(
        out,
        "infer",
        &InferRun {
            checkpoint: &ckpt,
            data: &args.data,
            out: &args.out,
            options,
        },
        0,
    )?;
    let model = load_model(&ckpt)?;
    let data = Manifest::load(&args.data)?;
    let rows = score_manifest(&model, &data, &options)?;
    write_scores(&args.out, &rows)?;
    writeln!(out, "wrote {} frame scores for {} clips to {}", rows.len(), data.len(), args.out.display())?;
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn eval(args: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let scores = read_scores(&args.scores)?;
    let annotations = read_annotations(&args.annotations)?;
    let frames = join_annotations(&scores, &annotations, args.fps)?;
    let report = evaluate(&frames)?;
    let json = serde_json::to_string_pretty(&report)?;
    writeln!(out, "{json}")?;
    if let Some(path) = &args.out {
        fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    /// Longest sequence for the fusion + classifier check.
    #[arg(long, default_value_t = 6)]
    max_t: usize,
    /// Write the per-op results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn grad_check(args: GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "command: grad-check")?;
    writeln!(out, "seeds: 0..{}", args.seeds)?;
    let sweep = grad_check_sweep(args.seeds, args.eps as asd_core::Float, args.tolerance, args.max_t)?;
    writeln!(out, "{}", sweep.render())?;
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&sweep)?)?;
    }
    if !sweep.passed() {
        bail!("gradient check failed for {} of {} checks", sweep.lines.iter().filter(|l| !l.passed).count(), sweep.lines.len());
    }
    Ok(())
}

#[derive(Args)]
struct RfReportArgs {
    #[arg(long, default_value = "paper")]
    scale: Scale,
    /// Also measure the perturbation support of randomly initialized
    /// encoders (seconds at desk scale).
    #[arg(long)]
    empirical: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset directory; without it a synthetic set is rendered in
    /// memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    val: Option<PathBuf>,
    /// In-memory training clips.
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value = "1:0.5,2:0.5")]
    mix: String,
    #[arg(long, value_parser = parse_duration, default_value = "2,3")]
    duration: [f64; 2],
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Comma-separated: none, cross, self, both.
    #[arg(long, default_value = "none", value_delimiter = ',')]
    drop: Vec<Drop>,
    /// Comma-separated: neg, noise, none.
    #[arg(long, default_value = "none", value_delimiter = ',')]
    aug: Vec<AugMode>,
    /// Comma-separated crop lengths or `variable`.
    #[arg(long, default_value = "25", value_delimiter = ',')]
    frames: Vec<Frames>,
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Also evaluate with another clip's audio mixed in at this SNR.
    #[arg(long)]
    noisy_eval_snr: Option<f64>,
    /// Directory for the ablation report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn ablate(args: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let plan = AblationPlan {
        base: args.overrides.resolve()?,
        drops: args.drop.clone(),
        augs: args.aug.clone(),
        frames: args.frames.clone(),
        seeds: args.seeds.clone(),
        noise_dir: args.noise_dir.clone(),
        noisy_eval_snr_db: args.noisy_eval_snr,
    };
    plan.validate()?;
    let (train_set, val) = match &args.data {
        Some(dir) => {
            let val = args.val.as_ref().ok_or_else(|| usage("--data needs --val"))?;
            (Manifest::load(dir)?, Manifest::load(val)?)
        }
        None => {
            let mix: ConditionMix = args.mix.parse().map_err(|e: asd_core::AsdError| usage(e.to_string()))?;
            let specs = plan_dataset(args.n + args.n_val, &mix, args.duration, RenderOptions::default().fps, args.data_seed)?;
            let (tr, va) = specs.split_at(args.n);
            (
                Manifest::in_memory(tr.to_vec(), RenderOptions::default(), args.data_seed),
                Manifest::in_memory(va.to_vec(), RenderOptions::default(), args.data_seed),
            )
        }
    };
    echo_config(
        out,
        "ablate",
        &serde_json::json!({
            "plan": &plan,
            "data": &args.data,
            "val": &args.val,
            "n": train_set.len(),
            "n_val": val.len(),
            "mix": &args.mix,
            "duration": args.duration,
            "data_seed": args.data_seed,
        }),
        args.data_seed,
    )?;
    let report = run_ablation(&plan, &train_set, &val, &mut |r| {
        let noisy = r.noisy_map.map_or(String::new(), |m| format!("  noisy_map {m:.4}"));
        let _ = writeln!(out, "{}  seed {}  loss {:.4}  map {:.4}{noisy}", r.label, r.seed, r.final_loss, r.map);
    })?;
    write!(out, "{}", report.table())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
        write_artifact_manifest(dir, "ablate", &plan)?;
    }
    Ok(())
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Eval(a) => eval(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::RfReport(a) => {
            writeln!(out, "command: rf-report")?;
            writeln!(out, "{}", rf_report(a.scale, a.empirical)?)?;
            Ok(())
        }
        Command::Ablate(a) => ablate(a, out),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| usage(e.to_string()))?;
    run(cli, out)
}

/// 2 for bad invocations, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

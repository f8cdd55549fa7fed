//! End-to-end optimization: Adam with per-epoch learning-rate decay,
//! fixed-length crops or length-bucketed variable batches, per-clip
//! augmentation, validation, and checkpoints.
//!
//! Determinism: the clip order of an epoch and every per-clip seed are pure
//! functions of `(seed, augmentation.seed, epoch, clip index)`, so results do
//! not depend on how many worker threads prepare the batches.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention_fusion::Drop;
use crate::audio_features::{MfccConfig, MfccExtractor, Waveform};
use crate::augmentation::{draw_snr, external_noise_mix, negative_sample_mix, visual_augment, AugmentationPlan};
use crate::classifier::PROB_CLAMP;
use crate::error::{invalid, AsdError, Result};
use crate::evaluation::{average_precision, ScoreRow, ScoredFrame};
use crate::model::{AsdModel, ModelConfig};
use crate::nn::{Ctx, ParamStore};
use crate::numeric::{container, Float, Tensor};
use crate::synthetic_data::{FaceTrackClip, Manifest};
use crate::visual_encoder::{FaceFrameSequence, FACE_SIZE};
use crate::Scale;

/// Crop lengths accepted for fixed-length training.
pub const FIXED_FRAME_CHOICES: [usize; 5] = [5, 10, 25, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied once per epoch.
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model_scale: Scale,
    pub drop: Drop,
    pub augmentation: AugmentationPlan,
    /// Crop (or pad) every training clip to this many frames; `None` trains
    /// on whole clips.
    pub fixed_frames: Option<usize>,
    /// Stop after the first epoch whose validation mAP reaches this value.
    pub target_map: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_decay_per_epoch: 0.95,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            model_scale: Scale::Desk,
            drop: Drop::None,
            augmentation: AugmentationPlan::default(),
            fixed_frames: None,
            target_map: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(invalid!("lr_decay_per_epoch {} outside (0, 1]", self.lr_decay_per_epoch));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if let Some(n) = self.fixed_frames {
            if !FIXED_FRAME_CHOICES.contains(&n) {
                return Err(invalid!("fixed_frames {n} not one of {FIXED_FRAME_CHOICES:?}"));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(invalid!("adam betas must lie in [0, 1) and eps be positive"));
        }
        self.augmentation.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_scale(self.model_scale).with_drop(self.drop)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_per_epoch.powi(epoch as i32)
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [Float],
    grads: &[Float],
    m: &mut [Float],
    v: &mut [Float],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(invalid!(
            "adam_step: {n} params, {} grads, {}/{} moments",
            grads.len(),
            m.len(),
            v.len()
        ));
    }
    if t == 0 {
        return Err(invalid!("adam_step: steps count from 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        let g = grads[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as Float;
        v[i] = vi as Float;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        params[i] = (params[i] as f64 - step) as Float;
    }
    Ok(())
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape().to_vec())))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter that has a gradient; the rest (and their
    /// moments) stay untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = (
                self.m.get_mut(name).ok_or_else(|| invalid!("no moments for {name}"))?,
                self.v.get_mut(name).ok_or_else(|| invalid!("no moments for {name}"))?,
            );
            if g.shape() != p.shape() {
                return Err(invalid!("gradient of {name}: shape {:?} != {:?}", g.shape(), p.shape()));
            }
            adam_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, lr, &self.config)?;
        }
        Ok(())
    }
}

/// splitmix64 folded over `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const ORDER_STREAM: u64 = 1;
const CLIP_STREAM: u64 = 2;

/// Model inputs for one optimization step. Items shorter than `frames` are
/// zero-padded and masked out of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clip_indices: Vec<usize>,
    pub frames: usize,
    /// Valid frames per item.
    pub lengths: Vec<usize>,
    /// `[N, 1, T, 112, 112]`.
    pub faces: Tensor,
    /// `[N, 4T, 13]`.
    pub mfcc: Tensor,
    pub labels: Vec<Float>,
    pub mask: Vec<bool>,
}

/// A cropped, visually augmented clip awaiting audio mixing.
struct Item {
    index: usize,
    faces: Vec<Float>,
    audio: Vec<Float>,
    labels: Vec<u8>,
    seed: u64,
}

/// Clip indices of each step of `epoch`. Fixed-length mode chunks a seeded
/// shuffle; variable-length mode sorts that shuffle by length (stable),
/// chunks it, and shuffles the chunk order.
pub fn epoch_batches(manifest: &Manifest, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, cfg.augmentation.seed, epoch as u64, ORDER_STREAM]));
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    shuffle(&mut order, &mut rng);
    if cfg.fixed_frames.is_none() {
        order.sort_by_key(|&i| manifest.clips[i].frames);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if cfg.fixed_frames.is_none() {
        shuffle(&mut batches, &mut rng);
    }
    batches
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: AsdModel,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    extractor: MfccExtractor,
}

/// Per-epoch entry of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: Option<f64>,
    pub lr: f64,
}

/// Contents of a checkpoint's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub adam_steps: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Seed of the epoch-order and per-clip generators; with `epoch` it
    /// fixes all remaining randomness.
    pub rng_seed: u64,
    pub val_map: Option<f64>,
    pub params_fingerprint: String,
}

pub const CHECKPOINT_META: &str = "meta.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AsdError::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| AsdError::io(path, e))
}

fn moments_dir(dir: &Path, which: &str) -> std::path::PathBuf {
    dir.join("adam").join(which)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = AsdModel::new(config.model_config(), config.seed);
        Ok(Self::with_model(config, model))
    }

    fn with_model(config: TrainConfig, model: AsdModel) -> Self {
        let adam = Adam::new(&model.store, config.adam);
        Self {
            config,
            model,
            adam,
            epoch: 0,
            extractor: MfccExtractor::new(16_000, MfccConfig::default()).expect("default MFCC config"),
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at_epoch(&self.config, self.epoch)
    }

    /// Renders, crops, augments and stacks the clips `indices` of
    /// `manifest` as they appear in `epoch`.
    pub fn prepare_batch(&self, manifest: &Manifest, indices: &[usize], epoch: usize) -> Result<Batch> {
        if indices.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let cfg = &self.config;
        let plan = &cfg.augmentation;
        let fps = manifest.render.fps;
        let spf = manifest.render.sample_rate as f64 / fps;
        if spf.fract() != 0.0 {
            return Err(invalid!("{} Hz audio does not divide into {fps} fps frames", manifest.render.sample_rate));
        }
        let spf = spf as usize;
        let frames = match cfg.fixed_frames {
            Some(n) => n,
            None => indices.iter().map(|&i| manifest.clips[i].frames).max().unwrap_or(0),
        };
        let items: Vec<Item> = indices
            .par_iter()
            .map(|&index| -> Result<Item> {
                let seed = derive_seed(&[cfg.seed, plan.seed, epoch as u64, CLIP_STREAM, index as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let clip = manifest.clip(index)?;
                let t = clip.len();
                let (start, keep) = match cfg.fixed_frames {
                    Some(n) if t > n => (rng.random_range(0..=t - n), n),
                    _ => (0, t.min(frames)),
                };
                let cropped = crop_faces(&clip.faces, start, keep)?;
                let faces = visual_augment(&cropped, &plan.visual, rng.random())?;
                let audio = clip.audio.samples()[start * spf..(start + keep) * spf].to_vec();
                Ok(Item {
                    index,
                    faces: faces.frames.into_data(),
                    audio,
                    labels: clip.labels[start..start + keep].to_vec(),
                    seed: rng.random(),
                })
            })
            .collect::<Result<_>>()?;

        let n = items.len();
        let sr = manifest.render.sample_rate;
        let mfcc: Vec<Vec<Float>> = (0..n)
            .into_par_iter()
            .map(|j| -> Result<Vec<Float>> {
                let it = &items[j];
                let mut samples = it.audio.clone();
                samples.resize(frames * spf, 0.0);
                let mut wave = Waveform::new(samples, sr)?;
                if plan.neg_sampling && n > 1 {
                    let mut rng = ChaCha8Rng::seed_from_u64(it.seed);
                    let other = &items[(j + 1 + rng.random_range(0..n - 1)) % n];
                    let noise = Waveform::new(other.audio.clone(), sr)?;
                    wave = negative_sample_mix(&wave, &noise, draw_snr(plan, &mut rng))?.waveform;
                } else if let Some(dir) = &plan.noise_dir {
                    wave = external_noise_mix(&wave, dir, plan.snr_db_range, it.seed)?.waveform;
                }
                Ok(self.extractor.extract(&wave, frames)?.frames.into_data())
            })
            .collect::<Result<_>>()?;

        let frame_px = FACE_SIZE * FACE_SIZE;
        let mut faces = Vec::with_capacity(n * frames * frame_px);
        let mut labels = Vec::with_capacity(n * frames);
        let mut mask = Vec::with_capacity(n * frames);
        for it in &items {
            faces.extend_from_slice(&it.faces);
            faces.resize(faces.len() + (frames - it.labels.len()) * frame_px, 0.0);
            for f in 0..frames {
                labels.push(it.labels.get(f).map_or(0.0, |&l| l as Float));
                mask.push(f < it.labels.len());
            }
        }
        Ok(Batch {
            clip_indices: items.iter().map(|it| it.index).collect(),
            frames,
            lengths: items.iter().map(|it| it.labels.len()).collect(),
            faces: Tensor::new(vec![n, 1, frames, FACE_SIZE, FACE_SIZE], faces)?,
            mfcc: Tensor::new(vec![n, 4 * frames, 13], mfcc.concat())?,
            labels,
            mask,
        })
    }

    /// Forward, loss, backward and one Adam update; returns the loss.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let model = &mut self.model;
        let mut ctx = Ctx::train(&mut model.store);
        let faces = ctx.input(batch.faces.clone());
        let mfcc = ctx.input(batch.mfcc.clone());
        let out = model.net.forward(&mut ctx, faces, mfcc)?;
        let loss = ctx.g.frame_bce(out.probs, &batch.labels, &batch.mask, PROB_CLAMP)?;
        let value = ctx.g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(AsdError::Numeric(format!("loss became {value}")));
        }
        let grads = ctx.g.backward(loss)?;
        let grads = ctx.param_grads(&grads);
        drop(ctx);
        self.adam.step(&mut model.store, &grads, lr)?;
        Ok(value)
    }

    /// One pass over `train`; returns the mean step loss.
    pub fn run_epoch(&mut self, train: &Manifest) -> Result<f64> {
        if train.is_empty() {
            return Err(invalid!("training manifest is empty"));
        }
        let lr = self.lr();
        let mut total = 0.0;
        let batches = epoch_batches(train, &self.config, self.epoch);
        for idx in &batches {
            let batch = self.prepare_batch(train, idx, self.epoch)?;
            total += self.step(&batch, lr)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    pub fn checkpoint_meta(&self, val_map: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            adam_steps: self.adam.t,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            rng_seed: self.config.seed,
            val_map,
            params_fingerprint: self.model.store.fingerprint(),
        }
    }

    /// `params/` and `adam/{m,v}/` hold TNSR1 files; `meta.json` the rest.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, val_map: Option<f64>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.store.save(dir.join("params"))?;
        for (which, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            let d = moments_dir(dir, which);
            fs::create_dir_all(&d).map_err(|e| AsdError::io(&d, e))?;
            for (name, t) in moments {
                container::write(d.join(format!("{name}.tnsr")), t)?;
            }
        }
        write_json(&dir.join(CHECKPOINT_META), &self.checkpoint_meta(val_map))
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let dir = dir.as_ref();
        let meta = read_checkpoint_meta(dir)?;
        if meta.config.hash() != meta.config_hash {
            return Err(AsdError::Format(format!("{}: config hash mismatch", dir.display())));
        }
        let mut model = AsdModel::new(meta.config.model_config(), meta.config.seed);
        model.store.load(dir.join("params"))?;
        let mut trainer = Self::with_model(meta.config.clone(), model);
        for (which, moments) in [("m", &mut trainer.adam.m), ("v", &mut trainer.adam.v)] {
            let d = moments_dir(dir, which);
            for (name, t) in moments.iter_mut() {
                let loaded = container::read(d.join(format!("{name}.tnsr")))?;
                if loaded.shape() != t.shape() {
                    return Err(AsdError::Format(format!("moment {which}/{name}: shape mismatch")));
                }
                *t = loaded;
            }
        }
        trainer.adam.t = meta.adam_steps;
        trainer.epoch = meta.epoch;
        Ok((trainer, meta))
    }
}

pub fn read_checkpoint_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join(CHECKPOINT_META);
    let text = fs::read_to_string(&path).map_err(|e| AsdError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| AsdError::Format(format!("{}: {e}", path.display())))
}

/// Parameters and statistics only, for inference.
pub fn load_model(dir: impl AsRef<Path>) -> Result<AsdModel> {
    let dir = dir.as_ref();
    let meta = read_checkpoint_meta(dir)?;
    let mut model = AsdModel::new(meta.config.model_config(), meta.config.seed);
    model.store.load(dir.join("params"))?;
    Ok(model)
}

fn crop_faces(faces: &FaceFrameSequence, start: usize, len: usize) -> Result<FaceFrameSequence> {
    let px = FACE_SIZE * FACE_SIZE;
    let data = faces.frames.data()[start * px..(start + len) * px].to_vec();
    FaceFrameSequence::new(Tensor::new(vec![len, 1, FACE_SIZE, FACE_SIZE], data)?, faces.fps)
}

/// Optional corruption of the evaluation audio with another clip's audio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Mix clip `(i + 1) mod n`'s audio into clip `i` at this SNR.
    pub noise_snr_db: Option<f64>,
    /// Clips per forward pass (clips are only batched with equal lengths).
    pub batch_size: usize,
}

/// Speaking probabilities for one clip in eval mode.
pub fn predict_clip(model: &AsdModel, clip: &FaceTrackClip) -> Result<Vec<Float>> {
    let mfcc = MfccExtractor::new(clip.audio.sample_rate(), MfccConfig::default())?.extract(&clip.audio, clip.len())?;
    let t = clip.len();
    let faces = clip.faces.frames.clone().reshape(vec![1, 1, t, FACE_SIZE, FACE_SIZE])?;
    let mfcc = mfcc.frames.reshape(vec![1, 4 * t, 13])?;
    forward_eval(model, faces, mfcc)
}

fn forward_eval(model: &AsdModel, faces: Tensor, mfcc: Tensor) -> Result<Vec<Float>> {
    let mut ctx = Ctx::eval(&model.store);
    let f = ctx.input(faces);
    let m = ctx.input(mfcc);
    let out = model.net.forward(&mut ctx, f, m)?;
    Ok(ctx.g.value(out.probs).data().to_vec())
}

/// Labelled per-frame scores for every clip of `manifest`, in manifest
/// order. Eval-mode outputs are per-sample, so batching equal-length clips
/// changes nothing but speed.
pub fn score_manifest(model: &AsdModel, manifest: &Manifest, opts: &ScoreOptions) -> Result<Vec<ScoreRow>> {
    let n = manifest.len();
    let extractor = MfccExtractor::new(manifest.render.sample_rate, MfccConfig::default())?;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in manifest.clips.iter().enumerate() {
        by_len.entry(c.frames).or_default().push(i);
    }
    let mut scores: Vec<Vec<Float>> = vec![Vec::new(); n];
    for (&t, group) in &by_len {
        for chunk in group.chunks(opts.batch_size.max(1)) {
            let inputs: Vec<(Vec<Float>, Vec<Float>)> = chunk
                .par_iter()
                .map(|&i| -> Result<_> {
                    let clip = manifest.clip(i)?;
                    let mut audio = clip.audio;
                    if let Some(snr) = opts.noise_snr_db {
                        if n > 1 {
                            let noise = manifest.clip((i + 1) % n)?.audio;
                            audio = negative_sample_mix(&audio, &noise, snr)?.waveform;
                        }
                    }
                    let mfcc = extractor.extract(&audio, t)?.frames.into_data();
                    Ok((clip.faces.frames.into_data(), mfcc))
                })
                .collect::<Result<_>>()?;
            let k = chunk.len();
            let (faces, mfcc): (Vec<_>, Vec<_>) = inputs.into_iter().unzip();
            let faces = Tensor::new(vec![k, 1, t, FACE_SIZE, FACE_SIZE], faces.concat())?;
            let mfcc = Tensor::new(vec![k, 4 * t, 13], mfcc.concat())?;
            let probs = forward_eval(model, faces, mfcc)?;
            for (j, &i) in chunk.iter().enumerate() {
                scores[i] = probs[j * t..(j + 1) * t].to_vec();
            }
        }
    }
    Ok(manifest
        .clips
        .iter()
        .zip(scores)
        .flat_map(|(spec, s)| {
            s.into_iter().enumerate().map(move |(f, p)| ScoreRow {
                clip_id: spec.clip_id.clone(),
                frame_index: f,
                score: p as f64,
                label: Some(spec.label()),
            })
        })
        .collect())
}

/// Frame-level mAP of `model` on `manifest`.
pub fn manifest_map(model: &AsdModel, manifest: &Manifest, opts: &ScoreOptions) -> Result<f64> {
    let frames: Vec<ScoredFrame> = score_manifest(model, manifest, opts)?
        .into_iter()
        .map(|r| ScoredFrame::new(r.clip_id, r.frame_index, r.score, r.label.unwrap_or(0)))
        .collect();
    average_precision(&frames)
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last";
pub const BEST_CHECKPOINT: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_map: Option<f64>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub trainer: Trainer,
    /// Highest validation mAP so far, or the final model without a
    /// validation set.
    pub best: AsdModel,
}

const EVAL_BATCH: usize = 8;

/// Full training run. With `out_dir`, appends each epoch to
/// `metrics.jsonl` and keeps `last/` and `best/` checkpoints there.
pub fn train(
    train: &Manifest,
    val: Option<&Manifest>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(invalid!("training manifest is empty"));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| AsdError::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| AsdError::io(&path, e))?, path))
        }
        None => None,
    };
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_map: None,
    };
    let mut best = trainer.model.clone();
    for epoch in 0..cfg.epochs {
        let lr = trainer.lr();
        let loss = trainer.run_epoch(train)?;
        let val_map = match val {
            Some(v) => Some(manifest_map(&trainer.model, v, &ScoreOptions {
                noise_snr_db: None,
                batch_size: EVAL_BATCH,
            })?),
            None => None,
        };
        let metrics = EpochMetrics { epoch, loss, val_map, lr };
        on_epoch(&metrics);
        if let Some((file, path)) = &mut log {
            let line = serde_json::to_string(&metrics).map_err(|e| AsdError::Format(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| AsdError::io(&*path, e))?;
        }
        let improved = match (val_map, report.best_val_map) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            report.best_epoch = Some(epoch);
            report.best_val_map = val_map;
            best = trainer.model.clone();
            if let Some(dir) = out_dir {
                trainer.save_checkpoint(dir.join(BEST_CHECKPOINT), val_map)?;
            }
        }
        if let Some(dir) = out_dir {
            trainer.save_checkpoint(dir.join(LAST_CHECKPOINT), val_map)?;
        }
        report.epochs.push(metrics);
        if let (Some(target), Some(m)) = (cfg.target_map, val_map) {
            if m >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { report, trainer, best })
}

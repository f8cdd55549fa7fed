//! Training-time augmentation: negative-sampling audio mixes, external noise
//! and per-clip flip / rotate / crop of face tracks.
//!
//! Everything here is a pure function of its inputs and a seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_features::{read_wav, Waveform};
use crate::error::{invalid, AsdError, Result};
use crate::numeric::{Float, Tensor};
use crate::visual_encoder::{FaceFrameSequence, FACE_SIZE};

/// Noise with an RMS below this is treated as silent.
pub const SILENT_RMS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualPlan {
    pub flip_prob: f64,
    pub rotate_deg_max: f64,
    pub crop_scale_min: f64,
}

impl Default for VisualPlan {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_deg_max: 15.0,
            crop_scale_min: 0.85,
        }
    }
}

impl VisualPlan {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_deg_max: 0.0,
            crop_scale_min: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    pub neg_sampling: bool,
    /// Mix in WAV files from this directory instead of other clips' audio.
    pub noise_dir: Option<PathBuf>,
    pub snr_db_range: [f64; 2],
    pub visual: VisualPlan,
    pub seed: u64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            neg_sampling: true,
            noise_dir: None,
            snr_db_range: [0.0, 15.0],
            visual: VisualPlan::default(),
            seed: 0,
        }
    }
}

impl AugmentationPlan {
    /// No audio mixing and identity visual transforms.
    pub fn none() -> Self {
        Self {
            neg_sampling: false,
            visual: VisualPlan::identity(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid!("snr_db_range [{lo}, {hi}] must satisfy low ≤ high"));
        }
        if self.neg_sampling && self.noise_dir.is_some() {
            return Err(invalid!("negative sampling and external noise are exclusive"));
        }
        let v = &self.visual;
        if !(0.0..=1.0).contains(&v.flip_prob) {
            return Err(invalid!("flip_prob {} outside [0, 1]", v.flip_prob));
        }
        if !(v.crop_scale_min > 0.0 && v.crop_scale_min <= 1.0) {
            return Err(invalid!("crop_scale_min {} outside (0, 1]", v.crop_scale_min));
        }
        if !(v.rotate_deg_max >= 0.0 && v.rotate_deg_max.is_finite()) {
            return Err(invalid!("rotate_deg_max {} must be ≥ 0", v.rotate_deg_max));
        }
        Ok(())
    }
}

/// Uniform draw from a closed range; degenerate ranges return the bound
/// without consuming randomness.
fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn draw_snr(plan: &AugmentationPlan, rng: &mut impl Rng) -> f64 {
    uniform(rng, plan.snr_db_range[0], plan.snr_db_range[1])
}

#[derive(Clone, Debug)]
pub struct MixResult {
    pub waveform: Waveform,
    /// Gain applied to the noise.
    pub gain: f64,
    /// Fraction of output samples clipped to ±1.
    pub clipped_fraction: f64,
    /// The noise was silent and the primary was returned unchanged.
    pub silent_noise: bool,
}

pub fn rms(x: &[Float]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// `primary + g·noise` with `g` chosen so the primary sits `snr_db` above
/// the noise. The noise is looped or truncated to the primary's length.
pub fn negative_sample_mix(primary: &Waveform, noise: &Waveform, snr_db: f64) -> Result<MixResult> {
    if primary.sample_rate() != noise.sample_rate() {
        return Err(invalid!(
            "sample rates differ: {} vs {}",
            primary.sample_rate(),
            noise.sample_rate()
        ));
    }
    if !snr_db.is_finite() {
        return Err(invalid!("snr_db must be finite"));
    }
    let ns = noise.samples();
    let fitted: Vec<Float> = if ns.is_empty() {
        Vec::new()
    } else {
        (0..primary.len()).map(|i| ns[i % ns.len()]).collect()
    };
    let noise_rms = rms(&fitted);
    if fitted.is_empty() || noise_rms < SILENT_RMS {
        log::warn!("negative_sample_mix: silent noise, primary returned unchanged");
        return Ok(MixResult {
            waveform: primary.clone(),
            gain: 0.0,
            clipped_fraction: 0.0,
            silent_noise: true,
        });
    }
    let gain = rms(primary.samples()) / (noise_rms * 10f64.powf(snr_db / 20.0));
    let mut clipped = 0usize;
    let out: Vec<Float> = primary
        .samples()
        .iter()
        .zip(&fitted)
        .map(|(&p, &q)| {
            let v = p as f64 + gain * q as f64;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0) as Float
        })
        .collect();
    let n = out.len().max(1);
    Ok(MixResult {
        waveform: Waveform::new(out, primary.sample_rate())?,
        gain,
        clipped_fraction: clipped as f64 / n as f64,
        silent_noise: false,
    })
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| AsdError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| AsdError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            files.push(path);
        }
    }
    // directory order is not portable
    files.sort();
    Ok(files)
}

/// Mixes one uniformly chosen WAV from `noise_dir` at an SNR drawn from
/// `snr_db_range`.
pub fn external_noise_mix(
    primary: &Waveform,
    noise_dir: impl AsRef<Path>,
    snr_db_range: [f64; 2],
    seed: u64,
) -> Result<MixResult> {
    let [lo, hi] = snr_db_range;
    if !(lo <= hi) {
        return Err(invalid!("snr_db_range [{lo}, {hi}] must satisfy low ≤ high"));
    }
    let files = wav_files(noise_dir.as_ref())?;
    if files.is_empty() {
        return Err(invalid!("no WAV files in {}", noise_dir.as_ref().display()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = &files[rng.random_range(0..files.len())];
    let snr = uniform(&mut rng, lo, hi);
    let noise = read_wav(path)?;
    negative_sample_mix(primary, &noise, snr)
}

/// Room-impulse-response convolution. Only the interface exists.
pub fn rir_convolve(_primary: &Waveform, _rir: &Waveform) -> Result<Waveform> {
    Err(AsdError::NotImplemented("room impulse response augmentation"))
}

/// One clip's spatial transform, applied identically to every frame.
/// Forward order: horizontal flip, rotation about the centre, then a square
/// crop of side `crop_scale · 112` at `crop_origin` rescaled to 112.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualTransform {
    pub flip: bool,
    pub angle_deg: f64,
    pub crop_scale: f64,
    /// `(x, y)` of the crop's top-left corner in pixels.
    pub crop_origin: (f64, f64),
}

impl VisualTransform {
    pub const IDENTITY: Self = Self {
        flip: false,
        angle_deg: 0.0,
        crop_scale: 1.0,
        crop_origin: (0.0, 0.0),
    };

    pub fn draw(plan: &VisualPlan, rng: &mut impl Rng) -> Self {
        let flip = plan.flip_prob > 0.0 && rng.random_bool(plan.flip_prob);
        let angle_deg = uniform(rng, -plan.rotate_deg_max, plan.rotate_deg_max);
        let crop_scale = uniform(rng, plan.crop_scale_min, 1.0);
        let slack = FACE_SIZE as f64 * (1.0 - crop_scale);
        let crop_origin = (uniform(rng, 0.0, slack), uniform(rng, 0.0, slack));
        Self {
            flip,
            angle_deg,
            crop_scale,
            crop_origin,
        }
    }

    /// Applies the transform to `[T, 1, 112, 112]` frames by inverse mapping
    /// with bilinear sampling and zero fill.
    pub fn apply(&self, frames: &FaceFrameSequence) -> Result<FaceFrameSequence> {
        let n = FACE_SIZE;
        let c = (n as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        // output pixel → source coordinate, computed once for all frames
        let map: Vec<(f64, f64)> = (0..n * n)
            .map(|i| {
                let (u, v) = ((i % n) as f64, (i / n) as f64);
                let x = self.crop_origin.0 + (u + 0.5) * self.crop_scale - 0.5;
                let y = self.crop_origin.1 + (v + 0.5) * self.crop_scale - 0.5;
                let (dx, dy) = (x - c, y - c);
                let (x, y) = if self.angle_deg == 0.0 {
                    (x, y)
                } else {
                    (c + cos * dx + sin * dy, c - sin * dx + cos * dy)
                };
                let x = if self.flip { n as f64 - 1.0 - x } else { x };
                (x, y)
            })
            .collect();
        let mut out = Vec::with_capacity(frames.frames.numel());
        for frame in frames.frames.data().chunks(n * n) {
            out.extend(map.iter().map(|&(x, y)| bilinear(frame, n, x, y)));
        }
        FaceFrameSequence::new(Tensor::new(frames.frames.shape().to_vec(), out)?, frames.fps)
    }
}

fn bilinear(img: &[Float], n: usize, x: f64, y: f64) -> Float {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= n as f64 || yi >= n as f64 {
            0.0
        } else {
            img[yi as usize * n + xi as usize] as f64
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + if fx > 0.0 { px(x0 + 1.0, y0) * fx } else { 0.0 };
    let bottom = if fy > 0.0 {
        (px(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { px(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 }) * fy
    } else {
        0.0
    };
    (top * (1.0 - fy) + bottom) as Float
}

/// Draws one transform from `seed` and applies it to every frame.
pub fn visual_augment(frames: &FaceFrameSequence, plan: &VisualPlan, seed: u64) -> Result<FaceFrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VisualTransform::draw(plan, &mut rng).apply(frames)
}

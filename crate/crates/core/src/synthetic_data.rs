//! Procedurally rendered face tracks covering the five combinations of
//! audio activity, lip motion and audio-visual synchrony.
//!
//! A latent mouth-openness trajectory drives both modalities: the height of
//! a dark mouth rectangle on a fixed face template, and the envelope of an
//! amplitude-modulated white-noise carrier. Whether the two share one
//! trajectory is the only thing separating condition 1 from condition 2.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_features::{read_wav, samples_for_frames, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, AsdError, Result};
use crate::numeric::{container, Float, Tensor};
use crate::visual_encoder::{FaceFrameSequence, FACE_SIZE};

pub const DEFAULT_FPS: f64 = 25.0;
/// Gaussian smoothing width of the openness trajectory, in frames.
pub const OPENNESS_SMOOTHING_FRAMES: f64 = 2.0;
/// Peak carrier amplitude at full envelope.
pub const CARRIER_AMPLITUDE: f64 = 0.5;
/// Scene size used for the normalized boxes in the annotation CSV.
pub const SCENE_WIDTH: f64 = 640.0;
pub const SCENE_HEIGHT: f64 = 360.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Condition {
    /// Active audio, moving lips, in sync: speaking.
    Sync = 1,
    /// Active audio, moving lips, out of sync.
    Unsync = 2,
    /// Active audio, still lips.
    StillLips = 3,
    /// Silence, moving lips.
    Silent = 4,
    /// Silence, still lips.
    SilentStill = 5,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Sync,
        Condition::Unsync,
        Condition::StillLips,
        Condition::Silent,
        Condition::SilentStill,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn audio_active(self) -> bool {
        matches!(self, Condition::Sync | Condition::Unsync | Condition::StillLips)
    }

    pub fn lips_moving(self) -> bool {
        matches!(self, Condition::Sync | Condition::Unsync | Condition::Silent)
    }

    /// Synchrony is only meaningful when both cues are present.
    pub fn synchronized(self) -> Option<bool> {
        (self.audio_active() && self.lips_moving()).then_some(self == Condition::Sync)
    }

    /// Speaking iff audio is active, the lips move, and the two are in sync.
    pub fn label(self) -> u8 {
        (self.audio_active() && self.lips_moving() && self.synchronized() == Some(true)) as u8
    }
}

impl TryFrom<u8> for Condition {
    type Error = AsdError;
    fn try_from(v: u8) -> Result<Self> {
        Condition::ALL
            .get((v as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| invalid!("condition must be 1..=5, got {v}"))
    }
}

impl From<Condition> for u8 {
    fn from(c: Condition) -> u8 {
        c.index()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Smoothed uniform noise rescaled to span [0, 1].
pub fn sample_openness(t: usize, seed: u64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(invalid!("openness trajectory needs T ≥ 1"));
    }
    let sigma = OPENNESS_SMOOTHING_FRAMES;
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..t + 2 * radius).map(|_| rng.random::<f64>()).collect();
    let smooth: Vec<f64> = (0..t)
        .map(|i| kernel.iter().zip(&raw[i..]).map(|(k, r)| k * r).sum::<f64>() / norm)
        .collect();
    let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        // a single frame is already a convex combination of U[0,1] draws
        return Ok(smooth);
    }
    Ok(smooth.into_iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub fps: f64,
    pub sample_rate: u32,
    /// Delay of the audio envelope behind the lips for condition 1, in
    /// frames.
    pub sync_lag_frames: i32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sync_lag_frames: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub face_width_px: u32,
    pub n_faces_in_scene: u32,
}

#[derive(Clone, Debug)]
pub struct FaceTrackClip {
    pub clip_id: String,
    pub faces: FaceFrameSequence,
    pub audio: Waveform,
    pub labels: Vec<u8>,
    pub condition: Condition,
    pub meta: ClipMeta,
    /// Mouth openness shown in the frames.
    pub openness: Vec<f64>,
    /// Envelope applied to the audio carrier, one value per frame.
    pub envelope: Vec<f64>,
}

impl FaceTrackClip {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const BACKGROUND: f64 = 0.25;
const SKIN: f64 = 0.65;
const EYE: f64 = 0.15;
const NOSE: f64 = 0.55;
const MOUTH: f64 = 0.08;
const MOUTH_X: (usize, usize) = (38, 74);
const MOUTH_CENTER_Y: f64 = 82.0;
const MOUTH_MIN_H: f64 = 2.0;
const MOUTH_SPAN_H: f64 = 18.0;

/// The face without a mouth, `112 × 112`.
fn template() -> &'static [f64] {
    static TEMPLATE: OnceLock<Vec<f64>> = OnceLock::new();
    TEMPLATE.get_or_init(|| {
        let n = FACE_SIZE;
        let inside = |x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64| {
            ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
        };
        (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                if inside(x, y, 40.0, 44.0, 7.0, 4.0) || inside(x, y, 72.0, 44.0, 7.0, 4.0) {
                    EYE
                } else if (53.0..59.0).contains(&x) && (50.0..66.0).contains(&y) {
                    NOSE
                } else if inside(x, y, 56.0, 58.0, 38.0, 48.0) {
                    SKIN
                } else {
                    BACKGROUND
                }
            })
            .collect()
    })
}

/// Paints the mouth for each openness value, with fractional coverage at
/// the top and bottom edges so that sub-pixel changes stay visible.
fn render_frames(openness: &[f64], brightness: f64, fps: f64) -> Result<FaceFrameSequence> {
    let n = FACE_SIZE;
    let base = template();
    let mut data = Vec::with_capacity(openness.len() * n * n);
    for &o in openness {
        let h = MOUTH_MIN_H + MOUTH_SPAN_H * o;
        let (top, bottom) = (MOUTH_CENTER_Y - h / 2.0, MOUTH_CENTER_Y + h / 2.0);
        for y in 0..n {
            let cover = ((y as f64 + 1.0).min(bottom) - (y as f64).max(top)).clamp(0.0, 1.0);
            for x in 0..n {
                let mut v = base[y * n + x];
                if cover > 0.0 && (MOUTH_X.0..MOUTH_X.1).contains(&x) {
                    v = v * (1.0 - cover) + MOUTH * cover;
                }
                data.push((v * brightness).clamp(0.0, 1.0) as Float);
            }
        }
    }
    FaceFrameSequence::new(Tensor::new(vec![openness.len(), 1, n, n], data)?, fps)
}

/// White noise whose amplitude follows `envelope`, linearly interpolated
/// between frame centres.
fn render_audio(envelope: &[f64], opts: &RenderOptions, rng: &mut impl Rng) -> Result<Waveform> {
    let t = envelope.len();
    let len = samples_for_frames(t, opts.fps, opts.sample_rate);
    let per_frame = opts.sample_rate as f64 / opts.fps;
    let samples = (0..len)
        .map(|s| {
            let pos = ((s as f64 + 0.5) / per_frame - 0.5).clamp(0.0, (t - 1) as f64);
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let e = if i + 1 < t {
                envelope[i] * (1.0 - frac) + envelope[i + 1] * frac
            } else {
                envelope[i]
            };
            let carrier: f64 = rng.random_range(-1.0..=1.0);
            (CARRIER_AMPLITUDE * e * carrier) as Float
        })
        .collect();
    Waveform::new(samples, opts.sample_rate)
}

/// Renders one clip from `(condition, T, seed)` with default metadata.
pub fn render_clip(condition: Condition, t: usize, fps: f64, sample_rate: u32, seed: u64) -> Result<FaceTrackClip> {
    let opts = RenderOptions {
        fps,
        sample_rate,
        ..RenderOptions::default()
    };
    let meta = ClipMeta {
        face_width_px: 96,
        n_faces_in_scene: 1,
    };
    render_clip_with(&format!("clip-{seed}"), condition, t, &opts, meta, seed)
}

pub fn render_clip_with(
    clip_id: &str,
    condition: Condition,
    t: usize,
    opts: &RenderOptions,
    meta: ClipMeta,
    seed: u64,
) -> Result<FaceTrackClip> {
    if t == 0 {
        return Err(invalid!("clip needs at least one frame"));
    }
    // Every condition draws the same quantities in the same order, so the
    // marginal statistics of each modality do not depend on the condition.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = rng.random_range(0.85..=1.15);
    let still_level: f64 = rng.random();
    let lips_seed = rng.next_u64();
    let voice_seed = rng.next_u64();
    let moving = sample_openness(t, lips_seed)?;
    let independent = sample_openness(t, voice_seed)?;

    let openness = if condition.lips_moving() {
        moving.clone()
    } else {
        vec![still_level; t]
    };
    let envelope = match condition {
        Condition::Sync => {
            let lag = opts.sync_lag_frames as i64;
            (0..t as i64).map(|i| moving[(i - lag).clamp(0, t as i64 - 1) as usize]).collect()
        }
        Condition::Unsync | Condition::StillLips => independent,
        Condition::Silent | Condition::SilentStill => vec![0.0; t],
    };
    let faces = render_frames(&openness, brightness, opts.fps)?;
    let audio = render_audio(&envelope, opts, &mut rng)?;
    Ok(FaceTrackClip {
        clip_id: clip_id.to_string(),
        faces,
        audio,
        labels: vec![condition.label(); t],
        condition,
        meta,
        openness,
        envelope,
    })
}

/// Condition proportions, e.g. `1:0.5,2:0.5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMix(pub Vec<(Condition, f64)>);

impl ConditionMix {
    pub fn new(parts: Vec<(Condition, f64)>) -> Result<Self> {
        if parts.is_empty() || parts.iter().any(|&(_, p)| !(p >= 0.0 && p.is_finite())) {
            return Err(invalid!("condition proportions must be non-negative"));
        }
        let total: f64 = parts.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid!("condition proportions sum to {total}, not 1"));
        }
        Ok(Self(parts))
    }

    /// Largest-remainder allocation of `n` clips.
    pub fn counts(&self, n: usize) -> Vec<(Condition, usize)> {
        let exact: Vec<f64> = self.0.iter().map(|&(_, p)| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        self.0.iter().zip(counts).map(|(&(c, _), k)| (c, k)).collect()
    }
}

impl FromStr for ConditionMix {
    type Err = AsdError;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for item in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (c, p) = item
                .split_once(':')
                .ok_or_else(|| invalid!("mix entry `{item}` is not condition:proportion"))?;
            let c: u8 = c.trim().parse().map_err(|_| invalid!("bad condition `{c}`"))?;
            let p: f64 = p.trim().parse().map_err(|_| invalid!("bad proportion `{p}`"))?;
            parts.push((Condition::try_from(c)?, p));
        }
        ConditionMix::new(parts)
    }
}

/// Everything needed to re-render one clip deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_id: String,
    pub condition: Condition,
    pub frames: usize,
    pub seed: u64,
    pub meta: ClipMeta,
    /// Normalized `[x1, y1, x2, y2]` boxes of every face in the scene; the
    /// first is the rendered track.
    pub boxes: Vec<[f64; 4]>,
}

impl ClipSpec {
    pub fn render(&self, opts: &RenderOptions) -> Result<FaceTrackClip> {
        render_clip_with(&self.clip_id, self.condition, self.frames, opts, self.meta, self.seed)
    }

    pub fn label(&self) -> u8 {
        self.condition.label()
    }
}

fn face_box(rng: &mut impl Rng, width_px: f64) -> [f64; 4] {
    let height_px = width_px * 1.25;
    let x1 = rng.random_range(0.0..=(SCENE_WIDTH - width_px));
    let y1 = rng.random_range(0.0..=(SCENE_HEIGHT - height_px).max(0.0));
    [
        x1 / SCENE_WIDTH,
        y1 / SCENE_HEIGHT,
        (x1 + width_px) / SCENE_WIDTH,
        ((y1 + height_px) / SCENE_HEIGHT).min(1.0),
    ]
}

/// Draws clip recipes: condition counts follow `mix` exactly (largest
/// remainder) in shuffled order, durations are uniform in `duration_s`.
pub fn plan_dataset(n: usize, mix: &ConditionMix, duration_s: [f64; 2], fps: f64, seed: u64) -> Result<Vec<ClipSpec>> {
    let [lo, hi] = duration_s;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(invalid!("duration range [{lo}, {hi}] must satisfy 0 < low ≤ high"));
    }
    if !(fps > 0.0) {
        return Err(invalid!("fps must be positive"));
    }
    let mut conditions: Vec<Condition> = mix
        .counts(n)
        .into_iter()
        .flat_map(|(c, k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates
    for i in (1..conditions.len()).rev() {
        let j = rng.random_range(0..=i);
        conditions.swap(i, j);
    }
    conditions
        .into_iter()
        .enumerate()
        .map(|(i, condition)| {
            let d = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let frames = ((d * fps).round() as usize).max(1);
            // log-uniform over 40..200 px spans all three size buckets
            let width = (40f64.ln() + rng.random::<f64>() * (200f64 / 40.0).ln()).exp().round();
            let n_faces = rng.random_range(1..=3u32);
            let boxes = (0..n_faces)
                .map(|k| {
                    let w = if k == 0 { width } else { rng.random_range(40.0..=200.0f64).round() };
                    face_box(&mut rng, w)
                })
                .collect();
            Ok(ClipSpec {
                clip_id: format!("clip{i:05}"),
                condition,
                frames,
                seed: rng.next_u64(),
                meta: ClipMeta {
                    face_width_px: width as u32,
                    n_faces_in_scene: n_faces,
                },
                boxes,
            })
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.csv";
pub const CLIP_DIR: &str = "clips";

/// A dataset: clip recipes plus, when written to disk, the directory
/// holding the rendered frames and audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub render: RenderOptions,
    pub clips: Vec<ClipSpec>,
    #[serde(skip)]
    pub root: Option<PathBuf>,
}

impl Manifest {
    /// Clips rendered on demand rather than read from disk.
    pub fn in_memory(clips: Vec<ClipSpec>, render: RenderOptions, seed: u64) -> Self {
        Self {
            seed,
            render,
            clips,
            root: None,
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn faces_path(root: &Path, spec: &ClipSpec) -> PathBuf {
        root.join(CLIP_DIR).join(format!("{}.faces.tnsr", spec.clip_id))
    }

    pub fn audio_path(root: &Path, spec: &ClipSpec) -> PathBuf {
        root.join(CLIP_DIR).join(format!("{}.wav", spec.clip_id))
    }

    /// Loads clip `i` from disk, or renders it when the manifest is in
    /// memory.
    pub fn clip(&self, i: usize) -> Result<FaceTrackClip> {
        let spec = self.clips.get(i).ok_or_else(|| invalid!("clip index {i} out of range"))?;
        match &self.root {
            None => spec.render(&self.render),
            Some(root) => {
                let frames = container::read(Self::faces_path(root, spec))?;
                let audio = read_wav(Self::audio_path(root, spec))?;
                let faces = FaceFrameSequence::new(frames, self.render.fps)?;
                if faces.len() != spec.frames {
                    return Err(AsdError::Format(format!(
                        "{}: {} frames on disk, manifest says {}",
                        spec.clip_id,
                        faces.len(),
                        spec.frames
                    )));
                }
                Ok(FaceTrackClip {
                    clip_id: spec.clip_id.clone(),
                    faces,
                    audio,
                    labels: vec![spec.label(); spec.frames],
                    condition: spec.condition,
                    meta: spec.meta,
                    openness: Vec::new(),
                    envelope: Vec::new(),
                })
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| AsdError::io(&path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| AsdError::Format(format!("{}: {e}", path.display())))?;
        m.root = Some(dir.to_path_buf());
        Ok(m)
    }

    /// Speaking frames over all frames.
    pub fn speaking_fraction(&self) -> f64 {
        let total: usize = self.clips.iter().map(|c| c.frames).sum();
        let speaking: usize = self.clips.iter().filter(|c| c.label() == 1).map(|c| c.frames).sum();
        speaking as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub clip_id: String,
    pub frame_timestamp_s: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: String,
    pub track_id: String,
}

pub const SPEAKING: &str = "SPEAKING_AUDIBLE";
pub const NOT_SPEAKING: &str = "NOT_SPEAKING";

/// One row per face per frame. The rendered track is `<clip_id>:0`; other
/// faces in the scene are non-speaking tracks `<clip_id>:1`, `<clip_id>:2`.
pub fn annotation_rows(spec: &ClipSpec, fps: f64) -> impl Iterator<Item = AnnotationRow> + '_ {
    (0..spec.frames).flat_map(move |f| {
        spec.boxes.iter().enumerate().map(move |(k, b)| AnnotationRow {
            clip_id: spec.clip_id.clone(),
            frame_timestamp_s: f as f64 / fps,
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
            label: if k == 0 && spec.label() == 1 { SPEAKING } else { NOT_SPEAKING }.to_string(),
            track_id: format!("{}:{k}", spec.clip_id),
        })
    })
}

pub fn write_annotations(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| AsdError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for spec in &manifest.clips {
        for row in annotation_rows(spec, manifest.render.fps) {
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

/// Renders `n_clips` clips into `out_dir` (frames as TNSR1, audio as WAV),
/// plus `annotations.csv` and `manifest.json`.
pub fn build_dataset(
    n_clips: usize,
    mix: &ConditionMix,
    duration_s: [f64; 2],
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Manifest> {
    let render = RenderOptions::default();
    let clips = plan_dataset(n_clips, mix, duration_s, render.fps, seed)?;
    let root = out_dir.as_ref().to_path_buf();
    let clip_dir = root.join(CLIP_DIR);
    std::fs::create_dir_all(&clip_dir).map_err(|e| AsdError::io(&clip_dir, e))?;
    clips.par_iter().try_for_each(|spec| -> Result<()> {
        let clip = spec.render(&render)?;
        container::write(Manifest::faces_path(&root, spec), &clip.faces.frames)?;
        write_wav(Manifest::audio_path(&root, spec), &clip.audio)
    })?;
    let mut manifest = Manifest::in_memory(clips, render, seed);
    write_annotations(root.join(ANNOTATION_FILE), &manifest)?;
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| AsdError::io(&path, e))?;
    manifest.root = Some(root);
    Ok(manifest)
}

//! Waveforms, MFCC extraction and audio/video length alignment.

mod mfcc;
mod wav;

pub use mfcc::{extract_mfcc, MelFilterbank, MfccConfig, MfccExtractor, MfccSequence};
pub use wav::{read_wav, write_wav};

use crate::error::{invalid, Result};
use crate::numeric::Float;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// MFCC frames per video frame: 100 Hz features against 25 fps video.
pub const AUDIO_FRAMES_PER_VIDEO_FRAME: usize = 4;

/// Mono audio with samples in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<Float>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Float>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(invalid!(
                "sample {i} = {} is outside [-1, 1] or not finite",
                samples[i]
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[Float] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<Float> {
        self.samples
    }
}

/// Sample count covering `frames` video frames at `fps`.
pub fn samples_for_frames(frames: usize, fps: f64, sample_rate: u32) -> usize {
    (frames as f64 / fps * sample_rate as f64).round() as usize
}

/// Trims or zero-pads the tail so the waveform spans exactly `frames / fps`
/// seconds.
pub fn align_lengths(w: &Waveform, fps: f64, frames: usize) -> Result<Waveform> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(invalid!("fps must be positive, got {fps}"));
    }
    let target = samples_for_frames(frames, fps, w.sample_rate);
    let mut samples = w.samples.clone();
    samples.resize(target, 0.0);
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

//! Pre-emphasis → Hamming frames → magnitude FFT → mel filterbank → log →
//! DCT-II.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Waveform, AUDIO_FRAMES_PER_VIDEO_FRAME};
use crate::error::{invalid, Result};
use crate::numeric::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfccConfig {
    pub pre_emphasis: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            pre_emphasis: 0.97,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            n_coeffs: 13,
            log_floor: 1e-10,
        }
    }
}

/// `[N_a, 13]` coefficients at a 10 ms hop.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccSequence {
    pub frames: Tensor,
    pub hop_ms: f64,
    pub window_ms: f64,
}

impl MfccSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the HTK mel scale from 0 Hz to
/// Nyquist, applied to the `n_fft/2 + 1` magnitude bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    centers_hz: Vec<f64>,
    /// `[n_mels][n_bins]`
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / n_fft as f64;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self {
            centers_hz: edges[1..=n_mels].to_vec(),
            weights,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Reusable MFCC pipeline for one sample rate.
pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: u32,
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
    /// `[n_coeffs][n_mels]` orthonormal DCT-II rows.
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(sample_rate: u32, config: MfccConfig) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        let win_len = (sample_rate as f64 * config.window_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * config.hop_ms / 1000.0).round() as usize;
        if win_len == 0 || hop == 0 || win_len > config.n_fft {
            return Err(invalid!(
                "a {} ms window at {sample_rate} Hz does not fit a {}-point FFT",
                config.window_ms,
                config.n_fft
            ));
        }
        if config.n_coeffs > config.n_mels {
            return Err(invalid!("cannot keep more cepstral coefficients than mel bands"));
        }
        let window = (0..win_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win_len - 1) as f64).cos())
            .collect();
        let m = config.n_mels as f64;
        let dct = (0..config.n_coeffs)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..config.n_mels)
                    .map(|n| scale * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            sample_rate,
            window,
            hop,
            fft: FftPlanner::new().plan_fft_forward(config.n_fft),
            filterbank: MelFilterbank::new(config.n_mels, config.n_fft, sample_rate),
            dct,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Mel energies per analysis frame (before the log). One frame starts at
    /// every hop inside the signal; samples past the end read as zero.
    pub fn mel_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        if w.is_empty() {
            return Err(invalid!("empty waveform"));
        }
        if w.sample_rate() != self.sample_rate {
            return Err(invalid!(
                "waveform is {} Hz but the extractor was built for {} Hz",
                w.sample_rate(),
                self.sample_rate
            ));
        }
        let x = w.samples();
        let alpha = self.config.pre_emphasis;
        let emph: Vec<f64> = (0..x.len())
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { x[i - 1] as f64 };
                x[i] as f64 - alpha * prev
            })
            .collect();
        let n_frames = emph.len().div_ceil(self.hop);
        let n_bins = self.config.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f * self.hop;
            buf.fill(Complex::new(0.0, 0.0));
            for (n, &wv) in self.window.iter().enumerate() {
                if let Some(&s) = emph.get(start + n) {
                    buf[n].re = s * wv;
                }
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let mag: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
            out.push(self.filterbank.apply(&mag));
        }
        Ok(out)
    }

    /// MFCCs padded with zero rows or truncated at the tail to exactly
    /// `4 · video_frames` rows.
    pub fn extract(&self, w: &Waveform, video_frames: usize) -> Result<MfccSequence> {
        if video_frames == 0 {
            return Err(invalid!("video frame count must be at least 1"));
        }
        let energies = self.mel_energies(w)?;
        let rows = AUDIO_FRAMES_PER_VIDEO_FRAME * video_frames;
        let nc = self.config.n_coeffs;
        let mut data = vec![0.0 as Float; rows * nc];
        for (r, e) in energies.iter().take(rows).enumerate() {
            let logs: Vec<f64> = e.iter().map(|v| v.max(self.config.log_floor).ln()).collect();
            for (k, basis) in self.dct.iter().enumerate() {
                let c: f64 = basis.iter().zip(&logs).map(|(a, b)| a * b).sum();
                data[r * nc + k] = c as Float;
            }
        }
        Ok(MfccSequence {
            frames: Tensor::new(vec![rows, nc], data)?,
            hop_ms: self.config.hop_ms,
            window_ms: self.config.window_ms,
        })
    }
}

/// One-shot MFCC extraction with the default configuration.
pub fn extract_mfcc(w: &Waveform, video_frames: usize) -> Result<MfccSequence> {
    MfccExtractor::new(w.sample_rate(), MfccConfig::default())?.extract(w, video_frames)
}

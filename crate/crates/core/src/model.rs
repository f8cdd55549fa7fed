//! The assembled detector: both encoders, fusion and the classifier.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_fusion::{Drop, Fusion, FusionConfig, FusionOutput};
use crate::audio_encoder::{AudioEncoder, AudioEncoderConfig};
use crate::classifier::{Classifier, PROB_CLAMP};
use crate::error::{invalid, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::numeric::registry::uniform;
use crate::numeric::{grad_check, Float, GradCheckOptions, GradCheckReport, Tensor, Var};
use crate::visual_encoder::{VisualEncoder, VisualEncoderConfig, FACE_SIZE};
use crate::Scale;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual: VisualEncoderConfig,
    pub audio: AudioEncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn for_scale(scale: Scale) -> Self {
        Self {
            visual: VisualEncoderConfig::for_scale(scale),
            audio: AudioEncoderConfig::for_scale(scale),
            fusion: FusionConfig::default(),
        }
    }

    pub fn with_drop(mut self, drop: Drop) -> Self {
        self.fusion.drop = drop;
        self
    }
}

/// Layer structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub fusion: Fusion,
    pub classifier: Classifier,
}

pub struct ModelOutput {
    /// `[N, T]` speaking probabilities.
    pub probs: Var,
    pub audio: Var,
    pub visual: Var,
    pub fusion: FusionOutput,
}

impl Network {
    /// `faces: [N, 1, T, 112, 112]`, `mfcc: [N, 4T, 13]`.
    pub fn forward(&self, ctx: &mut Ctx, faces: Var, mfcc: Var) -> Result<ModelOutput> {
        let fv = self.visual.encode(ctx, faces)?;
        let fa = self.audio.encode(ctx, mfcc)?;
        if ctx.g.shape(fa) != ctx.g.shape(fv) {
            return Err(invalid!(
                "audio embeddings {:?} and visual embeddings {:?} disagree",
                ctx.g.shape(fa),
                ctx.g.shape(fv)
            ));
        }
        let fusion = self.fusion.forward(ctx, fa, fv)?;
        let probs = self.classifier.predict(ctx, fusion.fused)?;
        Ok(ModelOutput {
            probs,
            audio: fa,
            visual: fv,
            fusion,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AsdModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl AsdModel {
    /// Kaiming-uniform weights, zero biases, unit norm scales, all drawn
    /// from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        assert_eq!(config.visual.embed_dim, config.fusion.dim);
        assert_eq!(config.audio.embed_dim, config.fusion.dim);
        let net = Network {
            visual: VisualEncoder::new(&mut init, "visual", config.visual.clone()),
            audio: AudioEncoder::new(&mut init, "audio", config.audio.clone()),
            fusion: Fusion::new(&mut init, "fusion", config.fusion.clone()),
            classifier: Classifier::new(&mut init, "classifier", 2 * config.fusion.dim),
        };
        Self { config, store, net }
    }
}

/// Gradient check of frame BCE through fusion and the classifier, with
/// respect to both embedding streams, on a random `[1, t, 128]` instance.
/// Parameters come from `seed`, inputs from the following two seeds.
pub fn fusion_path_grad_check(seed: u64, t: usize, eps: Float) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let config = FusionConfig::default();
    let dim = config.dim;
    let fusion = Fusion::new(&mut init, "f", config);
    let classifier = Classifier::new(&mut init, "c", 2 * dim);
    let labels: Vec<Float> = (0..t).map(|i| (i % 2) as Float).collect();
    let mask = vec![true; t];
    let inputs = [1, 2].map(|k| uniform(&[1, t, dim], &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(k))));
    grad_check(
        |g, v| {
            let mut ctx = Ctx::eval_in(&store, std::mem::take(g));
            let out = fusion.forward(&mut ctx, v[0], v[1])?;
            let p = classifier.predict(&mut ctx, out.fused)?;
            let loss = ctx.g.frame_bce(p, &labels, &mask, PROB_CLAMP);
            *g = ctx.into_graph();
            loss
        },
        &inputs,
        GradCheckOptions {
            eps,
            seed,
            kink_threshold: Some(0.1),
        },
    )
}

/// Output frames `j` (of `t`) whose embedding changes at all between two
/// inputs, by exact comparison.
fn changed_frames(a: &Tensor, b: &Tensor, t: usize) -> Vec<usize> {
    let c = a.numel() / t;
    (0..t)
        .filter(|&j| a.data()[j * c..(j + 1) * c] != b.data()[j * c..(j + 1) * c])
        .collect()
}

/// Empirical temporal support of the visual encoder: the output frames that
/// change when input frame `frame` of a random `t`-frame clip is inverted,
/// unioned over `seeds` (each seeds both the weights and the clip).
pub fn visual_perturbation_support(config: &VisualEncoderConfig, t: usize, frame: usize, seeds: &[u64]) -> Result<Vec<usize>> {
    if frame >= t {
        return Err(invalid!("frame {frame} outside a {t}-frame clip"));
    }
    let px = FACE_SIZE * FACE_SIZE;
    let mut union = BTreeSet::new();
    for &seed in seeds {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = VisualEncoder::new(&mut Init { store: &mut store, rng: &mut rng }, "visual", config.clone());
        let x: Vec<Float> = (0..t * px).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut bumped = x.clone();
        bumped[frame * px..(frame + 1) * px].iter_mut().for_each(|v| *v = 1.0 - *v);
        let run = |data: Vec<Float>| -> Result<Tensor> {
            let mut ctx = Ctx::eval(&store);
            let v = ctx.input(Tensor::new(vec![1, 1, t, FACE_SIZE, FACE_SIZE], data)?);
            let y = enc.encode(&mut ctx, v)?;
            Ok(ctx.g.value(y).clone())
        };
        union.extend(changed_frames(&run(x)?, &run(bumped)?, t));
    }
    Ok(union.into_iter().collect())
}

/// Empirical support of the audio encoder: the video-rate output frames
/// that change when MFCC row `row` of a random `[4t, 13]` input is shifted.
pub fn audio_perturbation_support(config: &AudioEncoderConfig, t: usize, row: usize, seeds: &[u64]) -> Result<Vec<usize>> {
    let rows = 4 * t;
    if row >= rows {
        return Err(invalid!("row {row} outside {rows} MFCC rows"));
    }
    let mut union = BTreeSet::new();
    for &seed in seeds {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = AudioEncoder::new(&mut Init { store: &mut store, rng: &mut rng }, "audio", config.clone());
        let x: Vec<Float> = (0..rows * 13).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut bumped = x.clone();
        bumped[row * 13..(row + 1) * 13].iter_mut().for_each(|v| *v += 5.0);
        let run = |data: Vec<Float>| -> Result<Tensor> {
            let mut ctx = Ctx::eval(&store);
            let v = ctx.input(Tensor::new(vec![1, rows, 13], data)?);
            let y = enc.encode(&mut ctx, v)?;
            Ok(ctx.g.value(y).clone())
        };
        union.extend(changed_frames(&run(x)?, &run(bumped)?, t));
    }
    Ok(union.into_iter().collect())
}

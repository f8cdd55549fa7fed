//! MFCC sequence `[4T, 13]` → `T × 128` audio embeddings.
//!
//! A 2-D residual network over (time, cepstrum) with squeeze-excitation in
//! every block. Two stride-2 stages bring 100 Hz features down to the 25 fps
//! video rate; the 13 cepstral bins are averaged away at the end.

use serde::{Deserialize, Serialize};

use crate::audio_features::AUDIO_FRAMES_PER_VIDEO_FRAME;
use crate::error::{invalid, Result};
use crate::nn::{conv2d_params, BatchNorm, Conv, Ctx, Init, Linear};
use crate::numeric::{compute_receptive_field, LayerSpec, Var};
use crate::Scale;

/// Where squeeze-excitation averages before computing channel weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SePool {
    /// One weight per channel from the whole `[H, W]` map.
    Global,
    /// One weight per channel and time step, pooled over the cepstral axis
    /// only. Keeps the temporal receptive field finite.
    Frequency,
}

/// Channel gating: pool → `C → C/r` → ReLU → `C/r → C` → sigmoid → rescale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub pool: SePool,
}

impl SqueezeExcite {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize, pool: SePool) -> Self {
        assert!(
            reduction > 0 && channels % reduction == 0,
            "SE: {channels} channels not divisible by reduction {reduction}"
        );
        let hidden = channels / reduction;
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels),
            pool,
        }
    }

    /// `x: [N, C, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self.pool {
            SePool::Global => {
                let s = ctx.g.mean_trailing(x, 2)?;
                let s = self.excite(ctx, s)?;
                ctx.g.mul_prefix(x, s)
            }
            SePool::Frequency => {
                let s = ctx.g.mean_trailing(x, 1)?;
                let s = ctx.g.permute(s, &[0, 2, 1])?;
                let s = self.excite(ctx, s)?;
                let s = ctx.g.permute(s, &[0, 2, 1])?;
                ctx.g.mul_prefix(x, s)
            }
        }
    }

    fn excite(&self, ctx: &mut Ctx, s: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, s)?;
        let h = ctx.g.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.g.sigmoid(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub scale: Scale,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    /// Time stride of the first block in each stage; the product must be 4.
    pub stage_time_strides: Vec<usize>,
    /// Time dilation per block, per stage.
    pub time_dilations: Vec<Vec<usize>>,
    pub se_reduction: usize,
    pub se_pool: SePool,
    pub embed_dim: usize,
}

impl AudioEncoderConfig {
    /// ResNet34 layout (3, 4, 6, 3 blocks); all dilations 1 give exactly a
    /// 189-frame receptive field.
    pub fn paper() -> Self {
        Self {
            scale: Scale::Paper,
            stem_channels: 16,
            stem_kernel: 7,
            stage_channels: vec![16, 32, 64, 128],
            stage_blocks: vec![3, 4, 6, 3],
            stage_time_strides: vec![1, 2, 2, 1],
            time_dilations: vec![vec![1; 3], vec![1; 4], vec![1; 6], vec![1; 3]],
            se_reduction: 16,
            se_pool: SePool::Frequency,
            embed_dim: 128,
        }
    }

    /// One block per stage; a dilated last block widens the field to 77
    /// frames.
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            stem_channels: 8,
            stem_kernel: 7,
            stage_channels: vec![8, 8, 16, 16],
            stage_blocks: vec![1, 1, 1, 1],
            stage_time_strides: vec![1, 2, 2, 1],
            time_dilations: vec![vec![1], vec![1], vec![1], vec![3]],
            se_reduction: 4,
            se_pool: SePool::Frequency,
            embed_dim: 128,
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Desk => Self::desk(),
        }
    }

    /// Temporal path: stem, then both 3×3 convolutions of every block.
    /// Shortcuts are pointwise in time and never widen the field.
    pub fn temporal_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::same(self.stem_kernel, 1, 2)];
        for (s, &blocks) in self.stage_blocks.iter().enumerate() {
            for b in 0..blocks {
                let d = self.time_dilations[s][b];
                let stride = if b == 0 { self.stage_time_strides[s] } else { 1 };
                specs.push(LayerSpec::new(3, stride, d, d, 2));
                specs.push(LayerSpec::same(3, d, 2));
            }
        }
        specs
    }

    pub fn receptive_field(&self) -> usize {
        compute_receptive_field(&self.temporal_specs())
    }

    pub fn time_stride_total(&self) -> usize {
        self.stage_time_strides.iter().product()
    }

    fn validate(&self) {
        let n = self.stage_channels.len();
        assert!(n > 0 && self.stage_blocks.len() == n && self.stage_time_strides.len() == n);
        assert!(self.time_dilations.len() == n);
        for (d, &b) in self.time_dilations.iter().zip(&self.stage_blocks) {
            assert_eq!(d.len(), b, "one dilation per block");
        }
        assert_eq!(
            self.time_stride_total(),
            AUDIO_FRAMES_PER_VIDEO_FRAME,
            "audio time strides must multiply to 4"
        );
        assert!(self.stem_kernel % 2 == 1);
    }
}

#[derive(Clone, Debug)]
struct SeBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    se: SqueezeExcite,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl SeBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize, cfg: &AudioEncoderConfig) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(init, &format!("{name}.down"), cin, cout, &[1, 1], conv2d_params([stride, 1], [1, 1], [0, 0]), false),
                BatchNorm::new(init, &format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, &[3, 3], conv2d_params([stride, 1], [dilation, 1], [dilation, 1]), false),
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), cout),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, &[3, 3], conv2d_params([1, 1], [dilation, 1], [dilation, 1]), false),
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), cout),
            se: SqueezeExcite::new(init, &format!("{name}.se"), cout, cfg.se_reduction.min(cout), cfg.se_pool),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = self.se.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.g.add(h, skip)?;
        ctx.g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub config: AudioEncoderConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<SeBlock>,
    proj: Linear,
}

impl AudioEncoder {
    pub fn new(init: &mut Init, name: &str, config: AudioEncoderConfig) -> Self {
        config.validate();
        let k = config.stem_kernel;
        let stem = Conv::new(
            init,
            &format!("{name}.stem"),
            1,
            config.stem_channels,
            &[k, k],
            conv2d_params([1, 1], [1, 1], [k / 2, k / 2]),
            false,
        );
        let stem_bn = BatchNorm::new(init, &format!("{name}.stem_bn"), config.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = config.stem_channels;
        for (s, &c) in config.stage_channels.iter().enumerate() {
            for b in 0..config.stage_blocks[s] {
                let stride = if b == 0 { config.stage_time_strides[s] } else { 1 };
                let d = config.time_dilations[s][b];
                blocks.push(SeBlock::new(init, &format!("{name}.stage{s}.{b}"), cin, c, stride, d, &config));
                cin = c;
            }
        }
        let proj = Linear::new(init, &format!("{name}.proj"), cin, config.embed_dim);
        Self {
            config,
            stem,
            stem_bn,
            blocks,
            proj,
        }
    }

    /// `[N, 4T, 13]` → `[N, T, 128]`.
    pub fn encode(&self, ctx: &mut Ctx, mfcc: Var) -> Result<Var> {
        let s = ctx.g.shape(mfcc).to_vec();
        if s.len() != 3 {
            return Err(invalid!("audio input must be [N, 4T, coeffs], got {s:?}"));
        }
        if s[1] % AUDIO_FRAMES_PER_VIDEO_FRAME != 0 {
            return Err(invalid!(
                "MFCC length {} is not a multiple of {AUDIO_FRAMES_PER_VIDEO_FRAME}",
                s[1]
            ));
        }
        let x = ctx.g.reshape(mfcc, &[s[0], 1, s[1], s[2]])?;
        let x = self.stem.forward(ctx, x)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let mut x = ctx.g.relu(x)?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        // [N, C, T, F] → mean over F → [N, T, C]
        let x = ctx.g.mean_trailing(x, 1)?;
        let x = ctx.g.permute(x, &[0, 2, 1])?;
        self.proj.forward(ctx, x)
    }
}

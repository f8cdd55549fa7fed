//! Face-crop sequence → `T × 128` visual embeddings.
//!
//! A 3-D convolution (temporal kernel 5) feeds a per-frame residual trunk
//! that is globally average-pooled; five residual depthwise-separable
//! temporal blocks and a kernel-7 projection follow. Temporal receptive
//! field: `1 + 4 + 5·2 + 6 = 21` frames.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{conv1d_params, conv2d_params, BatchNorm, Conv, Ctx, Init};
use crate::numeric::{compute_receptive_field, ConvParams, LayerSpec, Tensor, Var};
use crate::Scale;

pub const FACE_SIZE: usize = 112;

/// `T` grayscale face crops in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFrameSequence {
    /// `[T, 1, 112, 112]`
    pub frames: Tensor,
    pub fps: f64,
}

impl FaceFrameSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != FACE_SIZE || s[3] != FACE_SIZE {
            return Err(invalid!(
                "face frames must be [T, 1, {FACE_SIZE}, {FACE_SIZE}], got {s:?}"
            ));
        }
        if !(fps > 0.0) {
            return Err(invalid!("fps must be positive"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub scale: Scale,
    /// Spatial average-pool factor applied to the crops before the stem
    /// (1 disables it).
    pub stem_pool: usize,
    pub frontend_channels: usize,
    pub frontend_temporal_kernel: usize,
    pub frontend_spatial_kernel: usize,
    pub trunk_channels: Vec<usize>,
    pub trunk_blocks: Vec<usize>,
    pub trunk_strides: Vec<usize>,
    pub vtcn_blocks: usize,
    pub vtcn_kernel: usize,
    pub final_conv_kernel: usize,
    pub embed_dim: usize,
}

impl VisualEncoderConfig {
    pub fn paper() -> Self {
        Self {
            scale: Scale::Paper,
            stem_pool: 1,
            frontend_channels: 64,
            frontend_temporal_kernel: 5,
            frontend_spatial_kernel: 7,
            trunk_channels: vec![64, 128, 256, 512],
            trunk_blocks: vec![2, 2, 2, 2],
            trunk_strides: vec![2, 2, 2, 2],
            vtcn_blocks: 5,
            vtcn_kernel: 3,
            final_conv_kernel: 7,
            embed_dim: 128,
        }
    }

    /// Channels divided by 8, one block per stage and a pooled stem; same
    /// temporal structure as the paper scale.
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            stem_pool: 4,
            frontend_channels: 8,
            frontend_temporal_kernel: 5,
            frontend_spatial_kernel: 3,
            trunk_channels: vec![8, 16, 32, 64],
            trunk_blocks: vec![1, 1, 1, 1],
            trunk_strides: vec![1, 2, 2, 2],
            vtcn_blocks: 5,
            vtcn_kernel: 3,
            final_conv_kernel: 7,
            embed_dim: 128,
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Desk => Self::desk(),
        }
    }

    /// Layers on the temporal path, in order. Per-frame and pointwise layers
    /// have temporal kernel 1 and are omitted.
    pub fn temporal_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::same(self.frontend_temporal_kernel, 1, 2)];
        specs.extend((0..self.vtcn_blocks).map(|_| LayerSpec::same(self.vtcn_kernel, 1, 2)));
        specs.push(LayerSpec::same(self.final_conv_kernel, 1, 2));
        specs
    }

    pub fn receptive_field(&self) -> usize {
        compute_receptive_field(&self.temporal_specs())
    }

    fn validate(&self) {
        let n = self.trunk_channels.len();
        assert!(n > 0 && self.trunk_blocks.len() == n && self.trunk_strides.len() == n);
        for k in [self.frontend_temporal_kernel, self.frontend_spatial_kernel, self.vtcn_kernel, self.final_conv_kernel] {
            assert!(k % 2 == 1, "temporal and spatial kernels must be odd for same padding");
        }
        assert!(self.stem_pool >= 1 && FACE_SIZE % self.stem_pool == 0);
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let p = |s| conv2d_params([s, s], [1, 1], [1, 1]);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(init, &format!("{name}.down"), cin, cout, &[1, 1], conv2d_params([stride, stride], [1, 1], [0, 0]), false),
                BatchNorm::new(init, &format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, &[3, 3], p(stride), false),
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), cout),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, &[3, 3], p(1), false),
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
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

/// ReLU → BN → depthwise conv → pointwise conv, added to the input.
#[derive(Clone, Debug)]
struct VtcnBlock {
    bn: BatchNorm,
    depthwise: Conv,
    pointwise: Conv,
}

impl VtcnBlock {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = ctx.g.relu(x)?;
        let h = self.bn.forward(ctx, h)?;
        let h = self.depthwise.forward(ctx, h)?;
        let h = self.pointwise.forward(ctx, h)?;
        ctx.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    trunk: Vec<BasicBlock>,
    vtcn: Vec<VtcnBlock>,
    final_conv: Conv,
}

impl VisualEncoder {
    pub fn new(init: &mut Init, name: &str, config: VisualEncoderConfig) -> Self {
        config.validate();
        let kt = config.frontend_temporal_kernel;
        let ks = config.frontend_spatial_kernel;
        let c0 = config.frontend_channels;
        let stem = Conv::new(
            init,
            &format!("{name}.stem"),
            1,
            c0,
            &[kt, ks, ks],
            ConvParams {
                stride: [1, 2, 2],
                dilation: [1; 3],
                padding: [kt / 2, ks / 2, ks / 2],
                groups: 1,
            },
            false,
        );
        let stem_bn = BatchNorm::new(init, &format!("{name}.stem_bn"), c0);
        let mut trunk = Vec::new();
        let mut cin = c0;
        for (s, ((&c, &blocks), &stride)) in config
            .trunk_channels
            .iter()
            .zip(&config.trunk_blocks)
            .zip(&config.trunk_strides)
            .enumerate()
        {
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                trunk.push(BasicBlock::new(init, &format!("{name}.trunk{s}.{b}"), cin, c, st));
                cin = c;
            }
        }
        let k = config.vtcn_kernel;
        let vtcn = (0..config.vtcn_blocks)
            .map(|i| {
                let p = format!("{name}.vtcn{i}");
                VtcnBlock {
                    bn: BatchNorm::new(init, &format!("{p}.bn"), cin),
                    depthwise: Conv::new(init, &format!("{p}.depthwise"), cin, cin, &[k], conv1d_params(1, 1, k / 2, cin), true),
                    pointwise: Conv::new(init, &format!("{p}.pointwise"), cin, cin, &[1], conv1d_params(1, 1, 0, 1), true),
                }
            })
            .collect();
        let kf = config.final_conv_kernel;
        let final_conv = Conv::new(
            init,
            &format!("{name}.final"),
            cin,
            config.embed_dim,
            &[kf],
            conv1d_params(1, 1, kf / 2, 1),
            true,
        );
        Self {
            config,
            stem,
            stem_bn,
            trunk,
            vtcn,
            final_conv,
        }
    }

    pub fn trunk_out_channels(&self) -> usize {
        *self.config.trunk_channels.last().unwrap()
    }

    /// `[N, 1, T, 112, 112]` → per-frame embeddings `[N, T, C]`.
    pub fn frontend(&self, ctx: &mut Ctx, faces: Var) -> Result<Var> {
        let s = ctx.g.shape(faces).to_vec();
        if s.len() != 5 || s[1] != 1 || s[3] != FACE_SIZE || s[4] != FACE_SIZE {
            return Err(invalid!(
                "visual input must be [N, 1, T, {FACE_SIZE}, {FACE_SIZE}], got {s:?}"
            ));
        }
        let (n, t) = (s[0], s[2]);
        let mut x = faces;
        if self.config.stem_pool > 1 {
            x = ctx.g.avg_pool2d(x, self.config.stem_pool)?;
        }
        let x = self.stem.forward(ctx, x)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let x = ctx.g.relu(x)?;
        // [N, C, T, H, W] → [N·T, C, H, W]
        let x = ctx.g.permute(x, &[0, 2, 1, 3, 4])?;
        let cs = ctx.g.shape(x).to_vec();
        let mut x = ctx.g.reshape(x, &[n * t, cs[2], cs[3], cs[4]])?;
        for block in &self.trunk {
            x = block.forward(ctx, x)?;
        }
        let x = ctx.g.mean_trailing(x, 2)?;
        ctx.g.reshape(x, &[n, t, self.trunk_out_channels()])
    }

    /// `[N, T, C]` → `[N, T, 128]`.
    pub fn temporal_network(&self, ctx: &mut Ctx, per_frame: Var) -> Result<Var> {
        let mut x = ctx.g.permute(per_frame, &[0, 2, 1])?;
        for block in &self.vtcn {
            x = block.forward(ctx, x)?;
        }
        let x = self.final_conv.forward(ctx, x)?;
        ctx.g.permute(x, &[0, 2, 1])
    }

    pub fn encode(&self, ctx: &mut Ctx, faces: Var) -> Result<Var> {
        let f = self.frontend(ctx, faces)?;
        self.temporal_network(ctx, f)
    }
}

/// Stacks face sequences of equal length into `[N, 1, T, 112, 112]`.
pub fn batch_faces(seqs: &[&FaceFrameSequence]) -> Result<Tensor> {
    let t = seqs.first().ok_or_else(|| invalid!("empty batch"))?.len();
    let mut data = Vec::with_capacity(seqs.len() * t * FACE_SIZE * FACE_SIZE);
    for s in seqs {
        if s.len() != t {
            return Err(invalid!("batch mixes lengths {t} and {}", s.len()));
        }
        data.extend_from_slice(s.frames.data());
    }
    Tensor::new(vec![seqs.len(), 1, t, FACE_SIZE, FACE_SIZE], data)
}

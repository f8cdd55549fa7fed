use super::{Ctx, Init};
use crate::error::Result;
use crate::numeric::{ConvParams, Var};

/// Convolution over the trailing 1–3 axes with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub rank: usize,
    pub params: ConvParams,
}

impl Conv {
    /// `kernel` lists the kernel extent per convolved axis.
    pub fn new(
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: &[usize],
        params: ConvParams,
        bias: bool,
    ) -> Self {
        let rank = kernel.len();
        assert!((1..=3).contains(&rank));
        assert!(in_ch % params.groups == 0 && out_ch % params.groups == 0);
        let per_group = in_ch / params.groups;
        let mut shape = vec![out_ch, per_group];
        shape.extend_from_slice(kernel);
        let fan_in = per_group * kernel.iter().product::<usize>();
        let weight = init.kaiming(format!("{name}.weight"), shape, fan_in);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), vec![out_ch], 0.0));
        Self {
            weight,
            bias,
            rank,
            params,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(ctx.param(b)?),
            None => None,
        };
        ctx.g.conv(x, w, b, self.rank, &self.params)
    }
}

/// 1-D convolution parameters in the generic 3-axis layout.
pub fn conv1d_params(stride: usize, dilation: usize, padding: usize, groups: usize) -> ConvParams {
    ConvParams {
        stride: [1, 1, stride],
        dilation: [1, 1, dilation],
        padding: [0, 0, padding],
        groups,
    }
}

/// 2-D convolution parameters in the generic 3-axis layout.
pub fn conv2d_params(stride: [usize; 2], dilation: [usize; 2], padding: [usize; 2]) -> ConvParams {
    ConvParams {
        stride: [1, stride[0], stride[1]],
        dilation: [1, dilation[0], dilation[1]],
        padding: [0, padding[0], padding[1]],
        groups: 1,
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    gamma: String,
    beta: String,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0),
            name: init.running_stats(name.to_string(), channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma)?;
        let b = ctx.param(&self.beta)?;
        ctx.batch_norm(&self.name, x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.kaiming(format!("{name}.weight"), vec![output, input], input),
            bias: init.constant(format!("{name}.bias"), vec![output], 0.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = ctx.param(&self.bias)?;
        ctx.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), vec![dim], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![dim], 0.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma)?;
        let b = ctx.param(&self.beta)?;
        ctx.g.layer_norm(x, g, b, Self::EPS as _)
    }
}

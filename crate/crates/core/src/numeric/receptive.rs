//! Analytic receptive-field arithmetic for stacks of temporal convolutions.

use serde::{Deserialize, Serialize};

/// Temporal geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Zero padding applied on each side of the temporal axis.
    pub padding: usize,
    /// Index of the temporal axis in the layer's input layout.
    pub axis: usize,
}

impl LayerSpec {
    pub fn new(kernel_size: usize, stride: usize, dilation: usize, padding: usize, axis: usize) -> Self {
        assert!(kernel_size >= 1 && stride >= 1 && dilation >= 1, "invalid layer spec");
        Self {
            kernel_size,
            stride,
            dilation,
            padding,
            axis,
        }
    }

    /// Stride-1 layer with "same" zero padding (odd kernels only).
    pub fn same(kernel_size: usize, dilation: usize, axis: usize) -> Self {
        Self::new(kernel_size, 1, dilation, (kernel_size - 1) * dilation / 2, axis)
    }
}

/// Receptive field in input frames: `1 + Σ (K_i − 1)·d_i·J_i`, where `J_i`
/// is the product of the strides of all earlier layers. An empty stack has a
/// receptive field of one frame.
pub fn compute_receptive_field(specs: &[LayerSpec]) -> usize {
    receptive_window(specs).size
}

/// Where the receptive field of output frame `j` sits in the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    /// Product of all strides: input frames per output frame.
    pub jump: usize,
    /// Input frames to the left of `j·jump` covered by output `j`.
    pub offset: usize,
}

impl Window {
    /// Inclusive input-frame range that output frame `j` depends on (may
    /// extend outside the sequence, where padding lives).
    pub fn input_range(&self, j: usize) -> (isize, isize) {
        let start = (j * self.jump) as isize - self.offset as isize;
        (start, start + self.size as isize - 1)
    }

    /// Output frames whose window contains input frame `t`, clipped to
    /// `[0, out_len)`.
    pub fn outputs_touching(&self, t: usize, out_len: usize) -> std::ops::Range<usize> {
        let lo = (t as isize + self.offset as isize - self.size as isize + 1).max(0) as usize;
        let first = lo.div_ceil(self.jump);
        let last = (t + self.offset) / self.jump;
        first.min(out_len)..(last + 1).min(out_len)
    }
}

pub fn receptive_window(specs: &[LayerSpec]) -> Window {
    let mut size = 1;
    let mut jump = 1;
    let mut offset = 0;
    for s in specs {
        size += (s.kernel_size - 1) * s.dilation * jump;
        offset += s.padding * jump;
        jump *= s.stride;
    }
    Window { size, jump, offset }
}

//! Reverse-mode differentiation over tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order: each node's inputs have smaller ids. [`Graph::backward`] walks the
//! list once in reverse, visiting every reachable node exactly once.

use super::kernels::{gemm, ConvDims, ConvParams};
use super::tensor::{strides_of, Float, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormConfig {
    pub eps: Float,
    pub momentum: Float,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
        training: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanTrailing {
        x: Var,
        dims: usize,
    },
    AvgPool2d {
        x: Var,
        factor: usize,
    },
    MulPrefix {
        x: Var,
        s: Var,
    },
    SelectLast {
        x: Var,
        index: usize,
    },
    FrameBce {
        probs: Var,
        labels: Vec<Float>,
        mask: Vec<bool>,
        clamp: Float,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recording of tensor operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Pads a rank-1..3 spatial shape to `[D, H, W]`.
fn spatial3(dims: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    out[3 - dims.len()..].copy_from_slice(dims);
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(Float, Float) -> Float) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(Float) -> Float) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&x| x as f64).sum::<f64>();
        self.push(Tensor::scalar(s as Float), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().map(|&x| x as f64).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s as Float), Op::Mean(a), &[a], "mean")
    }

    /// Grouped 1-D cross-correlation. `x: [N, C_in, L]`, `w: [C_out,
    /// C_in/groups, K]`, optional `b: [C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let params = ConvParams {
            stride: [1, 1, stride],
            dilation: [1, 1, dilation],
            padding: [0, 0, padding],
            groups,
        };
        self.conv(x, w, b, 1, &params)
    }

    /// 2-D cross-correlation over the last two axes of `x: [N, C, H, W]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 2],
        dilation: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        let params = ConvParams {
            stride: [1, stride[0], stride[1]],
            dilation: [1, dilation[0], dilation[1]],
            padding: [0, padding[0], padding[1]],
            groups: 1,
        };
        self.conv(x, w, b, 2, &params)
    }

    /// 3-D cross-correlation over `x: [N, C, D, H, W]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let params = ConvParams {
            stride,
            dilation: [1; 3],
            padding,
            groups: 1,
        };
        self.conv(x, w, b, 3, &params)
    }

    /// Convolution over the trailing `rank` axes (1, 2 or 3).
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        rank: usize,
        params: &ConvParams,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if !(1..=3).contains(&rank) || xs.len() != rank + 2 || ws.len() != rank + 2 {
            return Err(invalid!(
                "conv{rank}d: expected rank-{} input and weight, got {xs:?} and {ws:?}",
                rank + 2
            ));
        }
        let sx = spatial3(&xs[2..]);
        let sw = spatial3(&ws[2..]);
        let dims = ConvDims::new(
            [xs[0], xs[1], sx[0], sx[1], sx[2]],
            [ws[0], ws[1], sw[0], sw[1], sw[2]],
            params,
        )?;
        if let Some(b) = b {
            if self.shape(b) != [dims.cout] {
                return Err(invalid!(
                    "conv: bias shape {:?} != [{}]",
                    self.shape(b),
                    dims.cout
                ));
            }
        }
        let y = dims.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![dims.n, dims.cout];
        shape.extend_from_slice(&dims.output[3 - rank..]);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_parts(shape, y),
            Op::Conv { x, w, b, dims },
            &inputs,
            "conv",
        )
    }

    /// Batch normalization over axis 1 of `x: [N, C, ...]`.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `running` with the configured momentum (unbiased
    /// variance); in eval mode `running` is used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        training: bool,
        cfg: NormConfig,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(invalid!("batch_norm: input needs [N, C, ...], got {xs:?}"));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(invalid!("batch_norm: parameters do not match {c} channels"));
        }
        let n = xs[0];
        let inner: usize = xs[2..].iter().product();
        let count = n * inner;
        let xd = self.value(x).data();
        let (mean, inv_std) = if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let chunk = &xd[(b * c + ch) * inner..][..inner];
                    mean[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for b in 0..n {
                for ch in 0..c {
                    let chunk = &xd[(b * c + ch) * inner..][..inner];
                    var[ch] += chunk
                        .iter()
                        .map(|&v| (v as f64 - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let m = cfg.momentum as f64;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                running.mean[ch] = ((1.0 - m) * running.mean[ch] as f64 + m * mean[ch]) as Float;
                running.var[ch] =
                    ((1.0 - m) * running.var[ch] as f64 + m * var[ch] * unbias) as Float;
            }
            let inv_std = var
                .iter()
                .map(|&v| (1.0 / (v + cfg.eps as f64).sqrt()) as Float)
                .collect::<Vec<_>>();
            (mean.iter().map(|&m| m as Float).collect::<Vec<_>>(), inv_std)
        } else {
            let inv_std = running
                .var
                .iter()
                .map(|&v| 1.0 / (v + cfg.eps).sqrt())
                .collect::<Vec<_>>();
            (running.mean.clone(), inv_std)
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        self.push(
            Tensor::from_parts(xs, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
            "batch_norm",
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| invalid!("layer_norm: rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(invalid!("layer_norm: parameters do not match last dim {d}"));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = is as Float;
            for i in 0..d {
                let h = ((row[i] as f64 - mean) * is) as Float;
                xhat[r * d + i] = h;
                y[r * d + i] = g[i] * h + bt[i];
            }
        }
        self.push(
            Tensor::from_parts(xs, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Affine map over the last axis: `x: [..., in]`, `w: [out, in]`,
    /// optional `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| invalid!("linear: rank-0 input"))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(invalid!("linear: weight {ws:?} incompatible with input {xs:?}"));
        }
        let out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(invalid!("linear: bias {:?} != [{out}]", self.shape(b)));
            }
        }
        let m = self.value(x).numel() / k;
        let mut y = vec![0.0; m * out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            m,
            k,
            out,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            1.0,
            &mut y,
            (out, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_parts(shape, y),
            Op::Linear { x, w, b },
            &inputs,
            "linear",
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(invalid!("softmax: axis {axis} out of range for {xs:?}"));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(Float::NEG_INFINITY, Float::max);
                let mut total = 0.0f64;
                for k in 0..len {
                    let e = (xd[idx(k)] - max).exp();
                    y[idx(k)] = e;
                    total += e as f64;
                }
                let inv = (1.0 / total) as Float;
                for k in 0..len {
                    y[idx(k)] *= inv;
                }
            }
        }
        self.push(Tensor::from_parts(xs, y), Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Batched matrix product over the last two axes. `a: [..., M, K]` and
    /// `b: [..., K, N]` (or `[..., N, K]` when `transpose_b`), with identical
    /// leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(invalid!("matmul: incompatible shapes {as_:?} and {bs:?}"));
        }
        let r = as_.len();
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (kb, n) = if transpose_b {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        if k != kb {
            return Err(invalid!("matmul: inner dims {k} and {kb} differ"));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0; batch * m * n];
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..][..m * k],
                (k, 1),
                &bd[i * k * n..][..k * n],
                b_strides,
                0.0,
                &mut y[i * m * n..][..m * n],
                (n, 1),
            );
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::from_parts(shape, y),
            Op::MatMul { a, b, transpose_b },
            &[a, b],
            "matmul",
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid!("permute: {perm:?} is not a permutation of rank {}", xs.len()));
        }
        let y = permute_data(self.value(x), perm);
        self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x], "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| invalid!("concat: no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid!("concat: axis {axis} out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(invalid!("concat: shape {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                y.extend_from_slice(&d[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, y),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
            "concat",
        )
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(invalid!("narrow: [{start}, {}) outside axis {axis} of {xs:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let d = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&d[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, y),
            Op::Narrow { x, axis, start },
            &[x],
            "narrow",
        )
    }

    /// Mean over the trailing `dims` axes (global average pooling).
    pub fn mean_trailing(&mut self, x: Var, dims: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if dims == 0 || dims >= xs.len() {
            return Err(invalid!("mean_trailing: cannot reduce {dims} axes of {xs:?}"));
        }
        let inner: usize = xs[xs.len() - dims..].iter().product();
        let y = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as Float)
            .collect();
        self.push(
            Tensor::from_parts(xs[..xs.len() - dims].to_vec(), y),
            Op::MeanTrailing { x, dims },
            &[x],
            "mean_trailing",
        )
    }

    /// Non-overlapping `factor × factor` average pooling of the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || factor == 0 || xs[r - 2] % factor != 0 || xs[r - 1] % factor != 0 {
            return Err(invalid!("avg_pool2d: {xs:?} not divisible by {factor}"));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (oh, ow) = (h / factor, w / factor);
        let planes = self.value(x).numel() / (h * w);
        let d = self.value(x).data();
        let norm = 1.0 / (factor * factor) as Float;
        let mut y = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &d[p * h * w..][..h * w];
            let dst = &mut y[p * oh * ow..][..oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / factor) * ow + j / factor] += src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        let mut shape = xs;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.push(
            Tensor::from_parts(shape, y),
            Op::AvgPool2d { x, factor },
            &[x],
            "avg_pool2d",
        )
    }

    /// `x * s` where `s`'s shape is a prefix of `x`'s shape, broadcast over
    /// the remaining trailing axes.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if ss.len() > xs.len() || xs[..ss.len()] != ss[..] {
            return Err(invalid!("mul_prefix: {ss:?} is not a prefix of {xs:?}"));
        }
        let inner: usize = xs[ss.len()..].iter().product();
        let sd = self.value(s).data();
        let y = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .zip(sd)
            .flat_map(|(c, &k)| c.iter().map(move |&v| v * k))
            .collect();
        self.push(Tensor::from_parts(xs, y), Op::MulPrefix { x, s }, &[x, s], "mul_prefix")
    }

    /// Picks element `index` of the last axis, dropping that axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().ok_or_else(|| invalid!("select_last: rank-0 input"))?;
        if index >= k || xs.len() < 2 {
            return Err(invalid!("select_last: index {index} invalid for {xs:?}"));
        }
        let y = self.value(x).data().chunks_exact(k).map(|c| c[index]).collect();
        self.push(
            Tensor::from_parts(xs[..xs.len() - 1].to_vec(), y),
            Op::SelectLast { x, index },
            &[x],
            "select_last",
        )
    }

    /// Frame-level binary cross-entropy of speaking probabilities `probs:
    /// [N, T]` against binary `labels`, ignoring frames where `mask` is
    /// false. Probabilities are clamped to `[clamp, 1 - clamp]` before the
    /// logarithms; each clip's loss is the mean over its valid frames and the
    /// result is the mean over clips.
    pub fn frame_bce(
        &mut self,
        probs: Var,
        labels: &[Float],
        mask: &[bool],
        clamp: Float,
    ) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        if ps.len() != 2 || labels.len() != ps[0] * ps[1] || mask.len() != labels.len() {
            return Err(invalid!(
                "frame_bce: probs {ps:?} vs {} labels / {} mask entries",
                labels.len(),
                mask.len()
            ));
        }
        let (n, t) = (ps[0], ps[1]);
        let pd = self.value(probs).data();
        let mut total = 0.0f64;
        let mut clips = 0usize;
        for b in 0..n {
            let mut acc = 0.0f64;
            let mut valid = 0usize;
            for i in 0..t {
                let idx = b * t + i;
                if !mask[idx] {
                    continue;
                }
                let s = (pd[idx] as f64).clamp(clamp as f64, 1.0 - clamp as f64);
                let y = labels[idx] as f64;
                acc -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
                valid += 1;
            }
            if valid > 0 {
                total += acc / valid as f64;
                clips += 1;
            }
        }
        if clips == 0 {
            return Err(invalid!("frame_bce: no valid frames"));
        }
        let loss = Tensor::scalar((total / clips as f64) as Float);
        self.push(
            loss,
            Op::FrameBce {
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                clamp,
            },
            &[probs],
            "frame_bce",
        )
    }

    /// Reverse-mode differentiation of the scalar `loss` with respect to
    /// every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<Float>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t
                .data_mut()
                .iter_mut()
                .zip(contrib)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), contrib));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accum(grads, *a, gd.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.accum(grads, *b, gd.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, gd.iter().map(|v| v * c).collect()),
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![gd[0] / n as Float; n]);
            }
            Op::Conv { x, w, b, dims } => {
                let (dx, dw, db) = dims.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accum(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let count = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += (gd[i] * xhat[i]) as f64;
                            dbeta[ch] += gd[i] as f64;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = if *training {
                                    // dxhat = g·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                                    let s = gam[ch] as f64 * inv_std[ch] as f64 / count;
                                    (s * (count * gd[i] as f64
                                        - dbeta[ch]
                                        - xhat[i] as f64 * dgamma[ch]))
                                        as Float
                                } else {
                                    gd[i] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                self.accum(grads, *gamma, dgamma.iter().map(|&v| v as Float).collect());
                self.accum(grads, *beta, dbeta.iter().map(|&v| v as Float).collect());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = gd.len() / d;
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * d..][..d];
                    let hr = &xhat[r * d..][..d];
                    let mut sum_dh = 0.0f64;
                    let mut sum_dh_h = 0.0f64;
                    for i in 0..d {
                        dgamma[i] += (gr[i] * hr[i]) as f64;
                        dbeta[i] += gr[i] as f64;
                        let dh = (gr[i] * gam[i]) as f64;
                        sum_dh += dh;
                        sum_dh_h += dh * hr[i] as f64;
                    }
                    let s = inv_std[r] as f64 / d as f64;
                    for i in 0..d {
                        let dh = (gr[i] * gam[i]) as f64;
                        dx[r * d + i] =
                            (s * (d as f64 * dh - sum_dh - hr[i] as f64 * sum_dh_h)) as Float;
                    }
                }
                if self.needs(*x) {
                    self.accum(grads, *x, dx);
                }
                self.accum(grads, *gamma, dgamma.iter().map(|&v| v as Float).collect());
                self.accum(grads, *beta, dbeta.iter().map(|&v| v as Float).collect());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out_dim, k) = (ws[0], ws[1]);
                let m = gd.len() / out_dim;
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(
                        m,
                        out_dim,
                        k,
                        gd,
                        (out_dim, 1),
                        self.value(*w).data(),
                        (k, 1),
                        0.0,
                        &mut dx,
                        (k, 1),
                    );
                    self.accum(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out_dim * k];
                    gemm(
                        out_dim,
                        m,
                        k,
                        gd,
                        (1, out_dim),
                        self.value(*x).data(),
                        (k, 1),
                        0.0,
                        &mut dw,
                        (k, 1),
                    );
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0f64; out_dim];
                        for row in gd.chunks_exact(out_dim) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                        }
                        self.accum(grads, *b, db.iter().map(|&v| v as Float).collect());
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let yd = out.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| (gd[idx(k)] * yd[idx(k)]) as f64).sum();
                        for k in 0..len {
                            dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot as Float);
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::MatMul { a, b, transpose_b } => {
                let as_ = self.shape(*a);
                let r = as_.len();
                let (m, k) = (as_[r - 2], as_[r - 1]);
                let n = out.shape()[r - 1];
                let batch: usize = as_[..r - 2].iter().product();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    // dA = dY · Bᵀ  (or dY · B when B was transposed)
                    let mut da = vec![0.0; batch * m * k];
                    let bstr = if *transpose_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..][..m * n],
                            (n, 1),
                            &bd[i * k * n..][..k * n],
                            bstr,
                            0.0,
                            &mut da[i * m * k..][..m * k],
                            (k, 1),
                        );
                    }
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..][..m * n];
                        let ai = &ad[i * m * k..][..m * k];
                        let dbi = &mut db[i * k * n..][..k * n];
                        if *transpose_b {
                            // dB[n×k] = dYᵀ · A
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), 0.0, dbi, (k, 1));
                        } else {
                            // dB[k×n] = Aᵀ · dY
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), 0.0, dbi, (n, 1));
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &inv);
                self.accum(grads, *x, back.into_data());
            }
            Op::Reshape(x) => self.accum(grads, *x, gd.to_vec()),
            Op::Concat { xs, axis } => {
                let shape = out.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accum(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = split_axis(xs, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    d[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                self.accum(grads, *x, d);
            }
            Op::MeanTrailing { x, dims } => {
                let xs = self.shape(*x);
                let inner: usize = xs[xs.len() - dims..].iter().product();
                let scale = 1.0 / inner as Float;
                let d = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, inner))
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::AvgPool2d { x, factor } => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as Float;
                let planes = self.value(*x).numel() / (h * w);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &gd[p * oh * ow..][..oh * ow];
                    let dst = &mut d[p * h * w..][..h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = src[(i / factor) * ow + j / factor] * norm;
                        }
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::MulPrefix { x, s } => {
                let sd = self.value(*s).data();
                let xd = self.value(*x).data();
                let inner = xd.len() / sd.len();
                if self.needs(*x) {
                    let d = gd
                        .chunks_exact(inner)
                        .zip(sd)
                        .flat_map(|(c, &k)| c.iter().map(move |&g| g * k))
                        .collect();
                    self.accum(grads, *x, d);
                }
                if self.needs(*s) {
                    let d = gd
                        .chunks_exact(inner)
                        .zip(xd.chunks_exact(inner))
                        .map(|(gc, xc)| {
                            gc.iter().zip(xc).map(|(&g, &v)| (g * v) as f64).sum::<f64>() as Float
                        })
                        .collect();
                    self.accum(grads, *s, d);
                }
            }
            Op::SelectLast { x, index } => {
                let k = *self.shape(*x).last().unwrap();
                let mut d = vec![0.0; gd.len() * k];
                for (i, &g) in gd.iter().enumerate() {
                    d[i * k + index] = g;
                }
                self.accum(grads, *x, d);
            }
            Op::FrameBce {
                probs,
                labels,
                mask,
                clamp,
            } => {
                let ps = self.shape(*probs);
                let (n, t) = (ps[0], ps[1]);
                let pd = self.value(*probs).data();
                let clips = (0..n)
                    .filter(|&b| mask[b * t..(b + 1) * t].iter().any(|&m| m))
                    .count() as f64;
                let mut d = vec![0.0; pd.len()];
                for b in 0..n {
                    let valid = mask[b * t..(b + 1) * t].iter().filter(|&&m| m).count();
                    if valid == 0 {
                        continue;
                    }
                    let w = gd[0] as f64 / (valid as f64 * clips);
                    for i in 0..t {
                        let idx = b * t + i;
                        let s = pd[idx] as f64;
                        if !mask[idx] || s <= *clamp as f64 || s >= 1.0 - *clamp as f64 {
                            continue;
                        }
                        let y = labels[idx] as f64;
                        d[idx] = (-w * (y / s - (1.0 - y) / (1.0 - s))) as Float;
                    }
                }
                self.accum(grads, *probs, d);
            }
        }
    }
}

/// Materializes `x` with its axes reordered so output axis `i` is input axis
/// `perm[i]`.
fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let data = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return x.clone();
    }
    // Iterate the output in row-major order with an odometer over indices;
    // the innermost axis is copied in a tight loop.
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        let base: usize = (0..last).map(|a| idx[a] * src_strides[a]).sum();
        out.extend((0..inner_len).map(|i| data[base + i * inner_stride]));
        let mut a = last;
        loop {
            if a == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

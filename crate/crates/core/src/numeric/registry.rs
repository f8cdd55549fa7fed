//! Every differentiable graph op, paired with a small random instance.
//!
//! Used by the gradient sweep in tests, the acceptance run and the
//! `grad-check` CLI command, so a new op only needs registering once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use super::graph::{Graph, NormConfig, RunningStats, Var};
use super::tensor::{Float, Tensor};
use crate::error::Result;

pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;
pub type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub op: OpFn,
    pub inputs: InputFn,
}

/// Uniform values in [−1, 1].
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Uniform magnitudes in [0.1, 1] with random sign, keeping clear of the
/// ReLU hinge.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: Float = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn bn_train(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let mut stats = RunningStats::new(3);
    g.batch_norm(v[0], v[1], v[2], &mut stats, true, NormConfig::default())
}

fn bn_eval(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let mut stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    g.batch_norm(v[0], v[1], v[2], &mut stats, false, NormConfig::default())
}

fn softmax_bce(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let p = g.softmax(v[0], 2)?;
    let s = g.select_last(p, 1)?;
    g.frame_bce(s, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[true; 6], 1e-7)
}

pub fn registered_ops() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, $op:expr, $inputs:expr) => {
            OpCase {
                name: $name,
                op: $op,
                inputs: $inputs,
            }
        };
    }
    vec![
        case!("add", |g, v| g.add(v[0], v[1]), |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)]),
        case!("sub", |g, v| g.sub(v[0], v[1]), |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)]),
        case!("mul", |g, v| g.mul(v[0], v[1]), |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)]),
        case!("scale", |g, v| g.scale(v[0], -1.5), |r| vec![uniform(&[5], r)]),
        case!("relu", |g, v| g.relu(v[0]), |r| vec![away_from_zero(&[4, 4], r)]),
        case!("sigmoid", |g, v| g.sigmoid(v[0]), |r| vec![uniform(&[4, 4], r)]),
        case!("sum", |g, v| g.sum(v[0]), |r| vec![uniform(&[3, 3], r)]),
        case!("mean", |g, v| g.mean(v[0]), |r| vec![uniform(&[3, 3], r)]),
        case!("linear", |g, v| g.linear(v[0], v[1], Some(v[2])), |r| {
            vec![uniform(&[4, 4], r), uniform(&[4, 4], r), uniform(&[4], r)]
        }),
        case!("conv1d_depthwise", |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 2, 2, 3), |r| {
            vec![uniform(&[2, 3, 7], r), uniform(&[3, 1, 3], r), uniform(&[3], r)]
        }),
        case!("conv1d_strided", |g, v| g.conv1d(v[0], v[1], None, 2, 1, 1, 1), |r| {
            vec![uniform(&[1, 2, 8], r), uniform(&[3, 2, 3], r)]
        }),
        case!("conv2d", |g, v| g.conv2d(v[0], v[1], Some(v[2]), [2, 1], [1, 2], [1, 2]), |r| {
            vec![uniform(&[2, 2, 5, 5], r), uniform(&[2, 2, 3, 3], r), uniform(&[2], r)]
        }),
        case!("conv3d", |g, v| g.conv3d(v[0], v[1], None, [1, 2, 2], [2, 1, 1]), |r| {
            vec![uniform(&[1, 1, 4, 5, 5], r), uniform(&[2, 1, 5, 3, 3], r)]
        }),
        case!("batch_norm_train", bn_train, |r| {
            vec![uniform(&[2, 3, 4], r), uniform(&[3], r), uniform(&[3], r)]
        }),
        case!("batch_norm_eval", bn_eval, |r| {
            vec![uniform(&[2, 3, 4], r), uniform(&[3], r), uniform(&[3], r)]
        }),
        case!("layer_norm", |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), |r| {
            vec![uniform(&[3, 6], r), uniform(&[6], r), uniform(&[6], r)]
        }),
        case!("softmax", |g, v| g.softmax(v[0], 1), |r| vec![uniform(&[3, 5, 2], r)]),
        case!("matmul", |g, v| g.matmul(v[0], v[1], false), |r| {
            vec![uniform(&[2, 3, 4], r), uniform(&[2, 4, 5], r)]
        }),
        case!("matmul_transposed", |g, v| g.matmul(v[0], v[1], true), |r| {
            vec![uniform(&[2, 3, 4], r), uniform(&[2, 5, 4], r)]
        }),
        case!("permute", |g, v| g.permute(v[0], &[2, 0, 1]), |r| vec![uniform(&[2, 3, 4], r)]),
        case!("reshape", |g, v| g.reshape(v[0], &[4, 3]), |r| vec![uniform(&[2, 6], r)]),
        case!("concat", |g, v| g.concat(&[v[0], v[1]], 1), |r| {
            vec![uniform(&[2, 3, 2], r), uniform(&[2, 1, 2], r)]
        }),
        case!("narrow", |g, v| g.narrow(v[0], 1, 1, 2), |r| vec![uniform(&[2, 4, 2], r)]),
        case!("mean_trailing", |g, v| g.mean_trailing(v[0], 2), |r| vec![uniform(&[2, 3, 4], r)]),
        case!("avg_pool2d", |g, v| g.avg_pool2d(v[0], 2), |r| vec![uniform(&[1, 2, 4, 6], r)]),
        case!("mul_prefix", |g, v| g.mul_prefix(v[0], v[1]), |r| {
            vec![uniform(&[2, 3, 4], r), uniform(&[2, 3], r)]
        }),
        case!("select_last", |g, v| g.select_last(v[0], 1), |r| vec![uniform(&[3, 2], r)]),
        case!("softmax_frame_bce", softmax_bce, |r| vec![uniform(&[2, 3, 2], r)]),
    ]
}

/// Gradient-checks `case` on the instance generated from `seed`.
pub fn check_case(case: &OpCase, seed: u64, eps: Float) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.inputs)(&mut rng);
    grad_check(
        case.op,
        &inputs,
        GradCheckOptions {
            eps,
            seed,
            kink_threshold: None,
        },
    )
}

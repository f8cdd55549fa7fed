//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{Float, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: Float,
    /// Seed of the random projection that turns a tensor output into a
    /// scalar loss.
    pub seed: u64,
    /// When set, coordinates whose one-sided slopes disagree by more than
    /// this fraction are treated as straddling a kink (e.g. a ReLU hinge)
    /// and skipped.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            seed: 0,
            kink_threshold: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinate with the largest error: `(input, index, analytic, numeric)`.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares analytic gradients of `f` against central differences for every
/// coordinate of every input.
///
/// Non-scalar outputs are reduced to `Σ r_k·y_k` with fixed random weights
/// `r_k ∈ [−1, 1]`, so every output element contributes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let n_out = g.value(out).numel();
    // A separate stream keeps the projection independent of inputs drawn
    // from the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x9c);
    let weights: Vec<Float> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::new(shape, weights.clone())?);
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum())
    };

    let base = if opts.kink_threshold.is_some() {
        eval(inputs)?
    } else {
        0.0
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let plus = x0 + opts.eps;
            let minus = x0 - opts.eps;
            work[i].data_mut()[j] = plus;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = minus;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            if let Some(thr) = opts.kink_threshold {
                let right = (fp - base) / (plus - x0) as f64;
                let left = (base - fm) / (x0 - minus) as f64;
                let scale = right.abs().max(left.abs()).max(1e-3);
                if (right - left).abs() > thr * scale {
                    report.skipped_kinks += 1;
                    continue;
                }
            }
            let numeric = (fp - fm) / (plus - minus) as f64;
            let a = analytic[i].data()[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((i, j, a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

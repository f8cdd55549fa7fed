//! Per-frame speaking probabilities and the frame-level cross-entropy.

use crate::error::{invalid, Result};
use crate::nn::{Ctx, Init, Linear};
use crate::numeric::{Float, Var};

/// Probability clamp applied before the logarithms of the loss.
pub const PROB_CLAMP: Float = 1e-7;

#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new(init: &mut Init, name: &str, input: usize) -> Self {
        Self {
            fc: Linear::new(init, &format!("{name}.fc"), input, 2),
        }
    }

    /// Logits `[N, T, 2]`.
    pub fn logits(&self, ctx: &mut Ctx, fused: Var) -> Result<Var> {
        self.fc.forward(ctx, fused)
    }

    /// Speaking probabilities `[N, T]`: softmax over the two classes, then
    /// the probability of class 1.
    pub fn predict(&self, ctx: &mut Ctx, fused: Var) -> Result<Var> {
        let z = self.logits(ctx, fused)?;
        probs_from_logits(ctx, z)
    }
}

pub fn probs_from_logits(ctx: &mut Ctx, logits: Var) -> Result<Var> {
    let p = ctx.g.softmax(logits, 2)?;
    ctx.g.select_last(p, 1)
}

/// Mean binary cross-entropy over frames, probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn frame_cross_entropy(scores: &[Float], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.is_empty() {
        return Err(invalid!("empty score sequence"));
    }
    let c = PROB_CLAMP as f64;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = (s as f64).clamp(c, 1.0 - c);
            if y == 1 {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Two-class softmax probability of class 1 for one frame's logits.
pub fn speaking_probability(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((speaking_probability(0.0, 3f64.ln()) - 0.75).abs() < 1e-12);
        assert_eq!(speaking_probability(2.5, 2.5), 0.5);
        let half = frame_cross_entropy(&[0.5; 4], &[1, 0, 0, 1]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-9);
        assert!(frame_cross_entropy(&[0.5], &[1, 0]).is_err());
    }
}

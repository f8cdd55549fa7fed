//! Cross-modal attention, feature concatenation and joint self-attention.
//!
//! `F_{a→v}` takes queries from the visual stream and keys/values from the
//! audio stream; `F_{v→a}` the reverse. Each attention layer is multi-head
//! attention, residual + layer norm, a ReLU feed-forward and another
//! residual + layer norm. The residual path is the key/value source, so
//! `F_{a→v}` stays anchored on audio features. No positional encoding is
//! used, which makes the whole stage permutation-equivariant in time.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear};
use crate::numeric::{Float, Graph, Var};

/// `softmax(Q Kᵀ / √d) V` over `[B, T, d]` operands. Returns the output and
/// the attention weights `[B, T_q, T_k]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, d: usize) -> Result<(Var, Var)> {
    if d == 0 {
        return Err(invalid!("attention head dimension must be positive"));
    }
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != d || ks[2] != d || ks[..2] != vs[..2] || qs[0] != ks[0] {
        return Err(invalid!("attention operands {qs:?}, {ks:?}, {vs:?} do not share d = {d}"));
    }
    let scores = g.matmul(q, k, true)?;
    let scores = g.scale(scores, (1.0 / (d as f64).sqrt()) as Float)?;
    let weights = g.softmax(scores, 2)?;
    let out = g.matmul(weights, v, false)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            dim,
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[N, T, D]` → `[N·H, T, d]`
    fn split(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let d = self.head_dim();
        let x = g.reshape(x, &[s[0], s[1], self.heads, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * self.heads, s[1], d])
    }

    /// Returns the projected output `[N, T_q, D]` and per-head weights
    /// `[N·H, T_q, T_k]`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, source: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, source)?;
        let v = self.v.forward(ctx, source)?;
        let (q, k, v) = (self.split(&mut ctx.g, q)?, self.split(&mut ctx.g, k)?, self.split(&mut ctx.g, v)?);
        let (o, w) = scaled_dot_attention(&mut ctx.g, q, k, v, self.head_dim())?;
        let qs = ctx.g.shape(query).to_vec();
        let o = ctx.g.reshape(o, &[qs[0], self.heads, qs[1], self.head_dim()])?;
        let o = ctx.g.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.g.reshape(o, &[qs[0], qs[1], self.dim])?;
        Ok((self.out.forward(ctx, o)?, w))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl AttentionLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Self {
        Self {
            mha: MultiHeadAttention::new(init, &format!("{name}.mha"), dim, heads),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            ff1: Linear::new(init, &format!("{name}.ff1"), dim, dim * ffn_mult),
            ff2: Linear::new(init, &format!("{name}.ff2"), dim * ffn_mult, dim),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
        }
    }

    /// Queries from `query`; keys, values and the residual from `source`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, source: Var) -> Result<(Var, Var)> {
        let (a, weights) = self.mha.forward(ctx, query, source)?;
        let h = ctx.g.add(source, a)?;
        let h = self.norm1.forward(ctx, h)?;
        let f = self.ff1.forward(ctx, h)?;
        let f = ctx.g.relu(f)?;
        let f = self.ff2.forward(ctx, f)?;
        let y = ctx.g.add(h, f)?;
        Ok((self.norm2.forward(ctx, y)?, weights))
    }
}

/// Attention stage, or the shape-preserving `x + W·x + b` stand-in used when
/// the stage is ablated.
#[derive(Clone, Debug)]
pub enum Block {
    Attention(AttentionLayer),
    Bypass(Linear),
}

impl Block {
    fn new(init: &mut Init, name: &str, dim: usize, cfg: &FusionConfig, enabled: bool) -> Self {
        if enabled {
            Block::Attention(AttentionLayer::new(init, name, dim, cfg.heads, cfg.ffn_mult))
        } else {
            Block::Bypass(Linear::new(init, &format!("{name}.bypass"), dim, dim))
        }
    }

    /// Weights are `None` for a bypass.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, source: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Block::Attention(layer) => {
                let (y, w) = layer.forward(ctx, query, source)?;
                Ok((y, Some(w)))
            }
            Block::Bypass(proj) => {
                let p = proj.forward(ctx, source)?;
                Ok((ctx.g.add(source, p)?, None))
            }
        }
    }
}

/// Which attention stages an ablation replaces with bypasses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drop {
    #[default]
    None,
    Cross,
    #[serde(rename = "self")]
    SelfAttn,
    Both,
}

impl std::str::FromStr for Drop {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Drop::None),
            "cross" => Ok(Drop::Cross),
            "self" => Ok(Drop::SelfAttn),
            "both" => Ok(Drop::Both),
            other => Err(format!("unknown drop `{other}` (none|cross|self|both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub drop: Drop,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 8,
            ffn_mult: 4,
            drop: Drop::None,
        }
    }
}

/// Intermediate tensors of one fusion pass.
pub struct FusionOutput {
    pub a_to_v: Var,
    pub v_to_a: Var,
    pub joint: Var,
    pub fused: Var,
    /// Attention weights of `a_to_v`, `v_to_a` and the self-attention layer
    /// (absent when bypassed).
    pub weights: [Option<Var>; 3],
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub a_to_v: Block,
    pub v_to_a: Block,
    pub joint: Block,
}

impl Fusion {
    pub fn new(init: &mut Init, name: &str, config: FusionConfig) -> Self {
        let cross = !matches!(config.drop, Drop::Cross | Drop::Both);
        let selfa = !matches!(config.drop, Drop::SelfAttn | Drop::Both);
        Self {
            a_to_v: Block::new(init, &format!("{name}.cross_a2v"), config.dim, &config, cross),
            v_to_a: Block::new(init, &format!("{name}.cross_v2a"), config.dim, &config, cross),
            joint: Block::new(init, &format!("{name}.self"), 2 * config.dim, &config, selfa),
            config,
        }
    }

    /// `F_a`, `F_v`: `[N, T, D]` each → `(F_{a→v}, F_{v→a})`.
    pub fn cross_attention(&self, ctx: &mut Ctx, fa: Var, fv: Var) -> Result<(Var, Var, [Option<Var>; 2])> {
        let (sa, sv) = (ctx.g.shape(fa).to_vec(), ctx.g.shape(fv).to_vec());
        if sa != sv {
            return Err(invalid!("audio {sa:?} and visual {sv:?} embeddings are not aligned"));
        }
        let (a2v, w1) = self.a_to_v.forward(ctx, fv, fa)?;
        let (v2a, w2) = self.v_to_a.forward(ctx, fa, fv)?;
        Ok((a2v, v2a, [w1, w2]))
    }

    /// Feature-axis concatenation `[N, T, 2D]`.
    pub fn fuse(&self, ctx: &mut Ctx, a_to_v: Var, v_to_a: Var) -> Result<Var> {
        ctx.g.concat(&[a_to_v, v_to_a], 2)
    }

    pub fn self_attention(&self, ctx: &mut Ctx, joint: Var) -> Result<(Var, Option<Var>)> {
        self.joint.forward(ctx, joint, joint)
    }

    pub fn forward(&self, ctx: &mut Ctx, fa: Var, fv: Var) -> Result<FusionOutput> {
        let (a_to_v, v_to_a, [w1, w2]) = self.cross_attention(ctx, fa, fv)?;
        let joint = self.fuse(ctx, a_to_v, v_to_a)?;
        let (fused, w3) = self.self_attention(ctx, joint)?;
        Ok(FusionOutput {
            a_to_v,
            v_to_a,
            joint,
            fused,
            weights: [w1, w2, w3],
        })
    }
}

//! Parameter storage and the layer building blocks shared by the encoders,
//! the fusion stage and the classifier.

mod layers;
mod params;

pub use layers::{conv1d_params, conv2d_params, BatchNorm, Conv, LayerNorm, Linear};
pub use params::{Init, ParamStore};

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::numeric::{Gradients, Graph, NormConfig, RunningStats, Tensor, Var};

enum Stats<'s> {
    Train(&'s mut BTreeMap<String, RunningStats>),
    Eval(&'s BTreeMap<String, RunningStats>),
}

/// One forward pass: a fresh graph plus parameters bound as leaves on
/// first use.
pub struct Ctx<'s> {
    pub g: Graph,
    params: &'s BTreeMap<String, Tensor>,
    stats: Stats<'s>,
    bound: BTreeMap<String, Var>,
    norm: NormConfig,
    grads: bool,
}

impl<'s> Ctx<'s> {
    /// Parameters require gradients; batch norm uses and updates batch
    /// statistics.
    pub fn train(store: &'s mut ParamStore) -> Self {
        let (params, stats) = store.split_mut();
        Self {
            g: Graph::new(),
            params,
            stats: Stats::Train(stats),
            bound: BTreeMap::new(),
            norm: NormConfig::default(),
            grads: true,
        }
    }

    /// Frozen parameters; batch norm uses running statistics.
    pub fn eval(store: &'s ParamStore) -> Self {
        let (params, stats) = store.parts();
        Self {
            g: Graph::new(),
            params,
            stats: Stats::Eval(stats),
            bound: BTreeMap::new(),
            norm: NormConfig::default(),
            grads: false,
        }
    }

    /// Eval-mode statistics but gradients on parameters (for gradient
    /// checks and dead-branch tests).
    pub fn eval_with_grads(store: &'s ParamStore) -> Self {
        let mut ctx = Self::eval(store);
        ctx.grads = true;
        ctx
    }

    /// Eval-mode context that records into an existing graph, so model
    /// layers can run inside closures that are handed a bare [`Graph`].
    pub fn eval_in(store: &'s ParamStore, g: Graph) -> Self {
        let mut ctx = Self::eval(store);
        ctx.g = g;
        ctx
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn training(&self) -> bool {
        matches!(self.stats, Stats::Train(_))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        let v = self.g.leaf(t.clone(), self.grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub(crate) fn batch_norm(&mut self, name: &str, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let norm = self.norm;
        match &mut self.stats {
            Stats::Train(stats) => {
                let s = stats
                    .get_mut(name)
                    .ok_or_else(|| invalid!("unknown statistics {name}"))?;
                self.g.batch_norm(x, gamma, beta, s, true, norm)
            }
            Stats::Eval(stats) => {
                let mut s = stats
                    .get(name)
                    .ok_or_else(|| invalid!("unknown statistics {name}"))?
                    .clone();
                self.g.batch_norm(x, gamma, beta, &mut s, false, norm)
            }
        }
    }

    /// Gradients of every bound parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

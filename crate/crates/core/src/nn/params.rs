//! Named parameters, batch-norm running statistics and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, AsdError, Result};
use crate::numeric::{container, Float, RunningStats, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if slot.shape() != value.shape() {
            return Err(invalid!(
                "parameter {name}: shape {:?} != {:?}",
                value.shape(),
                slot.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn stats(&self, name: &str) -> Option<&RunningStats> {
        self.stats.get(name)
    }

    pub fn stats_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.get_mut(name)
    }

    pub(crate) fn split_mut(
        &mut self,
    ) -> (&BTreeMap<String, Tensor>, &mut BTreeMap<String, RunningStats>) {
        (&self.params, &mut self.stats)
    }

    pub(crate) fn parts(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, RunningStats>) {
        (&self.params, &self.stats)
    }

    /// SHA-256 over names, shapes and values of parameters and statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update(container::encode(t));
        }
        for (name, s) in &self.stats {
            h.update(name.as_bytes());
            for v in s.mean.iter().chain(&s.var) {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One TNSR1 file per parameter (`<name>.tnsr`) and two per set of
    /// running statistics (`<name>.running_mean.tnsr`,
    /// `<name>.running_var.tnsr`).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| AsdError::io(dir, e))?;
        for (name, t) in &self.params {
            container::write(dir.join(format!("{name}.tnsr")), t)?;
        }
        for (name, s) in &self.stats {
            container::write(dir.join(format!("{name}.running_mean.tnsr")), &Tensor::vector(&s.mean))?;
            container::write(dir.join(format!("{name}.running_var.tnsr")), &Tensor::vector(&s.var))?;
        }
        Ok(())
    }

    /// Overwrites every parameter and statistic from `dir`. All entries must
    /// exist with matching shapes, so a checkpoint cannot silently load into
    /// a different architecture.
    pub fn load(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let t = container::read(dir.join(format!("{name}.tnsr")))?;
            self.set(&name, t)?;
        }
        for (name, s) in self.stats.iter_mut() {
            let mean = container::read(dir.join(format!("{name}.running_mean.tnsr")))?;
            let var = container::read(dir.join(format!("{name}.running_var.tnsr")))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(AsdError::Format(format!("running stats {name}: channel mismatch")));
            }
            s.mean = mean.into_data();
            s.var = var.into_data();
        }
        Ok(())
    }
}

/// Registers freshly initialized parameters.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn insert(&mut self, name: String, t: Tensor) -> String {
        assert!(
            self.store.params.insert(name.clone(), t).is_none(),
            "parameter {name} registered twice"
        );
        name
    }

    /// Kaiming-uniform: `U(−b, b)` with `b = √(6 / fan_in)`.
    pub fn kaiming(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> String {
        let bound = (6.0 / fan_in as f64).sqrt() as Float;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_parts(shape, data))
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: Float) -> String {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn running_stats(&mut self, name: String, channels: usize) -> String {
        assert!(
            self.store.stats.insert(name.clone(), RunningStats::new(channels)).is_none(),
            "statistics {name} registered twice"
        );
        name
    }
}

use indexmap::IndexMap;
use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name, in store order.
pub type Gradients = IndexMap<String, Tensor>;

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Adds a dense layer `y = x W + b` with `W: [fan_in, fan_out]` drawn
    /// uniformly from `±1/sqrt(fan_in)` and a zero bias.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng);
        self.insert(format!("{prefix}.weight"), w)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
    }

    /// Zeroes every entry whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

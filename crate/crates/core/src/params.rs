use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::tensor::Tensor;

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in other.iter() {
            if self.contains(k) {
                return Err(Error::Usage(format!("duplicate parameter `{k}`")));
            }
            self.insert(k, v.clone());
        }
        Ok(())
    }

    /// Sub-store of the entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    pub(crate) fn bind(&self, g: &mut ComputeGraph, name: &str) -> Result<Var> {
        g.param(name, self.get(name)?)
    }
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Scaled-normal init with std `1/sqrt(fan_in)`.
pub(crate) fn fan_in_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    normal_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

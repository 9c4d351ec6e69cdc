use std::collections::BTreeMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors plus a version counter bumped on every update.
///
/// Iteration order is the lexicographic order of names, which is also the
/// order tensors are laid out in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Float = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    version: u64,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            version: 0,
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replace a tensor in place, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{name}`: {:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            version: self.version,
        }
    }
}

/// Gradient map keyed by parameter name, shape-matched to a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Float = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    /// All-zero gradients for every parameter.
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Gradients {
            tensors: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Gradients { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Elementwise sum with another gradient map over the same names.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.tensors {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if slot.shape() != g.shape() {
                return Err(Error::shape(
                    "accumulate",
                    format!("`{name}`: {:?} vs {:?}", slot.shape(), g.shape()),
                ));
            }
            slot.add_assign(g);
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .values()
            .fold(T::zero(), |m, t| m.max(t.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{DiffArray, Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable arrays. Registration order is stable and defines the
/// checkpoint layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<DiffArray<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(alloc::format!("duplicate parameter {name}")));
        }
        self.arrays.push(DiffArray::new(shape, values)?);
        self.names.push(name.to_string());
        Ok(ParamId(self.arrays.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(DiffArray::len).sum()
    }

    /// Scalar parameter count over names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(_, _, a)| a.len())
            .sum()
    }

    pub fn get(&self, id: ParamId) -> &DiffArray<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray<T> {
        &mut self.arrays[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor<T> {
        self.arrays[id.0].tensor()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DiffArray<T>)> {
        self.arrays
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (a, n))| (ParamId(i), n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut DiffArray<T>)> {
        self.arrays
            .iter_mut()
            .enumerate()
            .map(|(i, a)| (ParamId(i), a))
    }

    pub fn zero_grads(&mut self) {
        self.arrays.iter_mut().for_each(DiffArray::zero_grad);
    }

    /// Euclidean norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .arrays
            .iter()
            .filter_map(|a| a.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum();
        libm::sqrt(sq)
    }

    pub fn scale_grads(&mut self, factor: T) {
        for a in &mut self.arrays {
            if let Some(g) = &mut a.grad {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// Replaces the values of the parameter called `name`.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
        let a = &mut self.arrays[id.0];
        if a.shape != shape || a.values.len() != values.len() {
            return Err(Error::dim("set_values", &a.shape, shape));
        }
        for (v, &x) in a.values.iter_mut().zip(values) {
            *v = T::of(x);
        }
        Ok(())
    }

    /// Same parameters in another precision. Gradients are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| DiffArray {
                    shape: a.shape.clone(),
                    values: a.values.iter().map(|x| U::of(x.as_f64())).collect(),
                    grad: None,
                })
                .collect(),
        }
    }

    /// Copies values (not gradients) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.values.copy_from_slice(&b.values);
        }
        Ok(())
    }

    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.values == b.values)
    }
}

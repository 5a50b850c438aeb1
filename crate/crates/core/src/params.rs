use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// One named parameter with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Ordered collection of named parameters. Insertion order is the iteration
/// order everywhere (norms, checkpoints, optimizer), which keeps every
/// reduction over parameters bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    /// Number of optimizer steps taken (Adam bias correction).
    pub step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let dims = value.dims().to_vec();
        let id = self.params.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn by_id(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Global L2 norm over every gradient, accumulated in f64 in insertion order.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of the parameter values in another precision; gradients and
    /// moments are reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names unique");
        }
        out
    }

    /// Values-only copy (fresh gradients and moments).
    pub fn snapshot(&self) -> ParamSet<T> {
        self.cast()
    }

    /// Checks that `other` has the same names and dims, in order.
    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return shape_err(
                "ParamSet",
                format!("{} vs {} parameters", self.params.len(), other.params.len()),
            );
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.dims() != b.value.dims() {
                return shape_err(
                    "ParamSet",
                    format!("`{}`{:?} vs `{}`{:?}", a.name, a.value.dims(), b.name, b.value.dims()),
                );
            }
        }
        Ok(())
    }

    /// Overwrites values from `other` (same layout).
    pub fn load_values(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value = b.value.clone();
        }
        Ok(())
    }
}

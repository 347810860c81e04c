use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Named model parameters, ordered by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("replace", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        BoundParams { vars }
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

//! Named parameter collections.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters keyed by their checkpoint name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.entries.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Arc::make_mut).ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), Arc::new(Tensor::zeros(v.shape())))).collect() }
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), Arc::new(f(k, v)))).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Elementwise sum of two sets with identical layout.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other, "add")?;
        Ok(self.map(|k, v| {
            let mut out = v.clone();
            out.add_assign(&other.entries[k]);
            out
        }))
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|_, v| v.scale(c))
    }

    pub fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape { op, detail: format!("{} vs {} tensors", self.len(), other.len()) });
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Shape { op, detail: format!("`{}` {:?} vs `{}` {:?}", ka, va.shape(), kb, vb.shape()) });
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape` as a parameter leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams { vars: self.entries.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().map(|(k, v)| (k, Arc::new(v))).collect() }
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct BoundParams<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))
    }

    /// Gradients of `objective` for every bound parameter, as a set with the same layout.
    pub fn gradient(&self, tape: &'t Tape<T>, objective: Var<'t, T>) -> Result<ParamSet<T>> {
        let vars: Vec<Var<'t, T>> = self.vars.values().copied().collect();
        let grads = tape.gradient(objective, &vars)?;
        Ok(self.vars.keys().cloned().zip(grads).collect())
    }
}

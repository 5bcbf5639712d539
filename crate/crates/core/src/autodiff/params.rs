use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Element, Tensor};
use super::AutodiffError;

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<E = f32> {
    params: BTreeMap<String, Tensor<E>>,
    grads: BTreeMap<String, Tensor<E>>,
}

/// Parameters of one store recorded as leaves on a tape.
#[derive(Clone)]
pub struct BoundParams<'t, E: Element = f32> {
    vars: BTreeMap<String, Var<'t, E>>,
}

impl<'t, E: Element> BoundParams<'t, E> {
    pub fn get(&self, name: &str) -> Result<Var<'t, E>, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::MissingParam { name: name.to_string() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'t, E>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl<E: Element> ParameterStore<E> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam { name });
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Record every parameter as a leaf. Frozen stores bind with
    /// `trainable = false` and never receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Result<BoundParams<'t, E>, AutodiffError> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.leaf(value.clone(), trainable)?);
        }
        Ok(BoundParams { vars })
    }

    /// Add a backward pass's gradients into the stored gradients. Repeated
    /// calls accumulate until [`Self::zero_grad`]. Every parameter gets an
    /// entry; parameters off the differentiable path receive exact zeros.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_, E>, grads: &mut Gradients<E>) {
        for (name, var) in &bound.vars {
            let shape = self.params[name].shape().to_vec();
            let entry = self.grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            if let Some(g) = grads.take(var.id()) {
                for (e, v) in entry.data_mut().iter_mut().zip(g.data()) {
                    *e += *v;
                }
            }
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<E>> {
        self.grads.get(name)
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor<E>> {
        &self.grads
    }

    pub fn take_grads(&mut self) -> BTreeMap<String, Tensor<E>> {
        std::mem::take(&mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn cast<F: Element>(&self) -> ParameterStore<F> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: BTreeMap::new(),
        }
    }

    /// Largest absolute difference over all parameters; `None` when the
    /// stores hold different names or shapes.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.params.len() != other.params.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((ka, va), (kb, vb)) in self.params.iter().zip(&other.params) {
            if ka != kb {
                return None;
            }
            worst = worst.max(va.max_abs_diff(vb)?);
        }
        Some(worst)
    }
}

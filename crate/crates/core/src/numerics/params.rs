use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::tensor::{Real, Tensor};

/// Named learnable tensors. BTreeMap keeps iteration order deterministic,
/// which the optimizer and checkpoint format rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn n_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Parameter leaves bound into one graph instance.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect this graph's gradients keyed by parameter name. Parameters
    /// the loss never touched get no entry.
    pub fn grads_by_name<F: Real>(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.of(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl<F: Real> Graph<F> {
    /// Insert every parameter as a leaf and remember the binding.
    pub fn bind(&mut self, params: &Params<F>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.leaf(t.clone()));
        }
        Bound { vars }
    }
}

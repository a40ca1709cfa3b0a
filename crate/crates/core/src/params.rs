//! Named parameter storage and its binding into a [`Graph`].

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered `name -> tensor` map. Iteration order is insertion order, which
/// fixes the serialisation layout and the optimizer's update order.
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Mutable access that panics on an unknown name; for tests and tools
    /// that construct special weights.
    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy of every tensor whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Names and shapes must match exactly, in order.
    pub fn check_same_structure(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Structure(format!(
                "{} tensors vs {} tensors",
                self.len(),
                other.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.iter().zip(other.iter()) {
            if ka != kb {
                return Err(Error::Structure(format!("name `{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Structure(format!(
                    "`{ka}` has shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Registers parameters with a fixed initialisation scheme.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    rng: &'a mut R,
    std: f64,
}

impl<'a, R: Rng> Initializer<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, std: f64) -> Self {
        Self { store, rng, std }
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize]) {
        let dist = Normal::new(0.0, self.std).unwrap();
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(self.rng));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) {
        self.store.insert(name, ArrayD::from_elem(IxDyn(shape), v));
    }

    /// `{prefix}.w` of shape `(fan_in, fan_out)` and `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out]);
        self.constant(format!("{prefix}.b"), &[fan_out], 0.0);
    }

    /// Like [`Self::linear`] but with weight std `1/sqrt(fan_in)`, so unit
    /// variance inputs give unit variance outputs.
    pub fn linear_fan_in(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let std = std::mem::replace(&mut self.std, 1.0 / (fan_in as f64).sqrt());
        self.linear(prefix, fan_in, fan_out);
        self.std = std;
    }

    /// `{prefix}.g` (ones) and `{prefix}.b` (zeros).
    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(format!("{prefix}.g"), &[dim], 1.0);
        self.constant(format!("{prefix}.b"), &[dim], 0.0);
    }
}

/// Parameters registered as leaves of one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Registers every tensor of `store` as a leaf: trainable leaves collect
    /// gradients, constant ones do not.
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects the gradient of every bound parameter, zero-filled where no
    /// gradient reached it.
    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::autograd::Gradients,
        store: &ParamStore,
    ) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in store.iter() {
            let var = self.vars[name];
            let grad = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            debug_assert_eq!(grad.shape(), g.shape(var));
            out.insert(name.clone(), grad);
        }
        out
    }
}

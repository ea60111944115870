//! Named parameter storage and the per-step binding of parameters to a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Model parameters by name. Iteration order is the name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// N(0, std²) initialization from a stream keyed by `(seed, name)`, so the
    /// value of a parameter does not depend on creation order.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        let mut r = rng::stream(&[seed, rng::hash_str(name)]);
        self.insert(name, Tensor::randn(shape, std, &mut r));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// One forward (and optionally backward) pass: a fresh tape plus the
/// parameters bound onto it so far.
///
/// Parameters are bound lazily on first use. In a frozen session they are
/// recorded as constants and no gradients are tracked.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.graph.leaf(value, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` wherever parameter `name` is requested.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Binds every parameter in the store, so that [`Session::backward`]
    /// reports a gradient (possibly all zeros) for each of them.
    pub fn bind_all(&mut self) -> Result<()> {
        let names: Vec<String> = self.store.names().cloned().collect();
        for n in names {
            self.param(&n)?;
        }
        Ok(())
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Gradients of `loss` for every bound parameter. Parameters off the
    /// loss's compute path get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

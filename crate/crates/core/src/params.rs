//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Adds every entry of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet<T>) {
        self.map.extend(other.map);
    }

    /// Entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a graph leaf; `trainable` decides which
    /// leaves track gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        Binding {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable(k))))
                .collect(),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weight of shape `[fan_in, fan_out]`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn([fan_in, fan_out], |_| T::c(rng.uniform_range(-bound, bound)));
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut RngStream) {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::c(rng.normal() * std));
        self.insert(name, t);
    }
}

impl ParamSet<f32> {
    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor<f32>)>) -> Self {
        ParamSet {
            map: tensors.into_iter().collect(),
        }
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor<f32>)> {
        self.map.into_iter().collect()
    }
}

/// Parameter name to graph variable lookup for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("parameter {name} is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Binds `name` to an existing graph variable, replacing any previous binding.
    pub fn insert(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Union of two bindings; entries of `other` win on name clashes.
    pub fn merge(mut self, other: Binding) -> Binding {
        self.vars.extend(other.vars);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param_ref(v)))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant_ref(v)))
            .collect();
        Bound { vars }
    }

    /// `p -= lr * g` for every accumulated gradient.
    pub fn sgd_step(&mut self, grads: &GradBuffer, lr: f64) {
        for (name, g) in &grads.grads {
            if let Some(p) = self.params.get_mut(name) {
                for (w, gv) in p.data_mut().iter_mut().zip(g) {
                    *w -= lr * gv;
                }
            }
        }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on an unknown name: parameter names are fixed by the model code.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Sum of parameter gradients over several backward passes.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, bound: &Bound, grads: &Gradients) {
        self.add_scaled(bound, grads, 1.0);
    }

    pub fn add_scaled(&mut self, bound: &Bound, grads: &Gradients, weight: f64) {
        for (name, var) in bound.iter() {
            let Some(g) = grads.get(var) else { continue };
            match self.grads.get_mut(name) {
                Some(buf) => {
                    for (o, v) in buf.iter_mut().zip(g.data()) {
                        *o += weight * v;
                    }
                }
                None => {
                    self.grads
                        .insert(name.to_string(), g.data().iter().map(|v| weight * v).collect());
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    /// Global L2 norm over every buffered gradient.
    pub fn norm(&self) -> f64 {
        self.grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales the buffer so its global norm is at most `max`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let norm = self.norm();
        if norm > max {
            let s = max / norm;
            self.grads.values_mut().flatten().for_each(|v| *v *= s);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

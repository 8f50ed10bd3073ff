//! Ordered, named parameter tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.push(n, Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::contract(op, "parameter sets have different layouts"));
        }
        Ok(())
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn load(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Collects gradients of every loaded parameter after `g.backward`.
    /// Parameters the loss does not depend on get zeros.
    pub fn gradients(&self, g: &Graph, vars: &ParamVars) -> Self {
        let mut out = Self::new();
        for ((n, t), v) in self.iter().zip(&vars.vars) {
            let grad = g
                .grad(*v)
                .map(|gr| gr.reshape(t.shape()).expect("gradient mirrors parameter"))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.push(n, grad);
        }
        out
    }
}

/// Graph handles for a loaded [`ParamSet`].
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract("params", format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

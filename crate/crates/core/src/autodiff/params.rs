use std::collections::BTreeMap;
use std::rc::Rc;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            bail!(Argument, "duplicate parameter {name}");
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Names existing tape variables, one per parameter in insertion order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundParams<'t>> {
        if vars.len() != self.values.len() {
            bail!(Shape, "{} variables for {} parameters", vars.len(), self.values.len());
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Reference-counted snapshot for repeated gradient-free binding.
    pub fn shared(&self) -> SharedParams {
        SharedParams {
            values: self.values.iter().cloned().map(Rc::new).collect(),
            index: self.index.clone(),
        }
    }

    /// Gradient of every parameter, in insertion order.
    pub fn gradients(&self, bound: &BoundParams<'_>, grads: &mut Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Tape handles for a [`ParamSet`].
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        match self.index.get(name) {
            Some(&i) => Ok(self.vars[i]),
            None => bail!(Lookup, "no parameter named {name}"),
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Immutable parameter snapshot whose tensors are shared, not copied, when
/// placed on a tape.
#[derive(Debug, Clone)]
pub struct SharedParams {
    values: Vec<Rc<Tensor>>,
    index: BTreeMap<String, usize>,
}

impl SharedParams {
    /// Binds every tensor as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Tensor>> {
        self.index.get(name).map(|&i| &self.values[i])
    }
}

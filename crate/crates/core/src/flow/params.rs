use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
pub type Pid = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, Pid>,
}

/// Tape handles for every parameter of a store, created by
/// [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: Pid) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<Pid> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParam(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: Pid) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: Pid) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<Pid> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: Pid, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id].shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                self.names[id],
                value.shape(),
                self.values[id].shape()
            )));
        }
        self.values[id] = value;
        Ok(())
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

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Ids of the parameters whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<Pid> {
        (0..self.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }

    /// A copy without the parameters whose names start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if !n.starts_with(prefix) {
                out.add(n.clone(), v.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Record every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

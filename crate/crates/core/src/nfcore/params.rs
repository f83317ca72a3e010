use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};

/// Role of a parameter; decides weight decay and gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    /// Learnable per-output gain of a standardized layer.
    Gain,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

/// Ordered, named parameter collection. Order is fixed at construction and is
/// the iteration order of every optimizer and serializer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> usize {
        let name = name.into();
        let id = self.params.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Replaces the value of parameter `i`; the shape must not change.
    pub fn set(&mut self, i: usize, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.params[i].value.shape(),
            "shape change for {}",
            self.params[i].name
        );
        self.params[i].value = Arc::new(value);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `g`, tracking gradients when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf_shared(p.value.clone(), trainable))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], in store order.
pub struct ParamVars<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, i: usize) -> Var<'g> {
        self.vars[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Var<'g>> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

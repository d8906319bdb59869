//! Named, ordered storage for learnable tensors and normalization statistics.

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::AutogradError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until a backward pass reaches this tensor.
    pub grad: Option<Tensor<T>>,
}

/// Invariant: names are unique and insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name: layer names are fixed by the model builder.
    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Register a parameter on `tape` as a gradient-receiving leaf.
    pub fn var<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Result<Var<'t, T>, AutogradError> {
        tape.param(id, self.entries[id.0].value.clone())
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Add a backward pass's parameter gradients into the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let e = &mut self.entries[id.0];
            match &mut e.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Same parameter layout converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                    grad: e.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

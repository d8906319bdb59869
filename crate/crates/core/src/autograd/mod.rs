//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in append order. A node
//! only ever references earlier nodes, so `backward` walks the list in strict
//! reverse order. One tape serves exactly one backward pass.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

pub use ops::OpKind;
pub(crate) use ops::Op;

use crate::error::AutogradError;
use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

pub(crate) struct Node<T: Scalar> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub label: u32,
    pub param: Option<ParamId>,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    labels: Vec<String>,
    current: u32,
}

pub struct Tape<T: Scalar = f32> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Restores the previous node label when dropped.
pub struct LabelGuard<'t, T: Scalar> {
    tape: &'t Tape<T>,
    prev: u32,
}

impl<T: Scalar> Drop for LabelGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().current = self.prev;
    }
}

/// Read-only view of one recorded node, used by the profiler.
#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
    pub param: Option<ParamId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
                labels: vec![String::new()],
                current: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Tag every node recorded until the guard drops with `label`.
    pub fn label(&self, label: &str) -> LabelGuard<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let prev = inner.current;
        let id = match inner.labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                inner.labels.push(label.to_string());
                inner.labels.len() - 1
            }
        };
        inner.current = id as u32;
        LabelGuard { tape: self, prev }
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var<'_, T>, AutogradError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        let label = inner.current;
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            label,
            param,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Result<Var<'_, T>, AutogradError> {
        self.push(value, Op::Leaf, true, None)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>, AutogradError> {
        self.push(value, Op::Leaf, false, None)
    }

    /// A leaf bound to a learnable parameter; its gradient is reported under `id`.
    pub fn param(&self, id: ParamId, value: Tensor<T>) -> Result<Var<'_, T>, AutogradError> {
        self.push(value, Op::Leaf, true, Some(id))
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        let inner = self.inner.borrow();
        assert!(!inner.consumed, "node value read after backward consumed the tape");
        inner.nodes[id].value.clone()
    }

    fn requires_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                let inputs = n.op.inputs();
                let shape_of = |i: usize| inner.nodes[inputs[i]].value.shape();
                let kind = match n.op.kind() {
                    OpKind::Matmul { .. } => OpKind::Matmul { k: shape_of(1)[0] },
                    OpKind::Conv2d { k, .. } => OpKind::Conv2d { c_in: shape_of(0)[1], k },
                    OpKind::ConvTranspose2d { k, .. } => OpKind::ConvTranspose2d { c_in: shape_of(0)[1], k },
                    other => other,
                };
                NodeInfo {
                id,
                kind,
                inputs,
                shape: n.value.shape().to_vec(),
                label: inner.labels[n.label as usize].clone(),
                param: n.param,
            }
            })
            .collect()
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape: node values
    /// are released and any further backward or op recording is an error.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, AutogradError> {
        let nodes = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(AutogradError::TapeConsumed);
            }
            if inner.nodes.is_empty() {
                return Err(AutogradError::EmptyTape);
            }
            let shape = inner.nodes[loss.id].value.shape().to_vec();
            if inner.nodes[loss.id].value.numel() != 1 {
                return Err(AutogradError::NonScalarLoss(shape));
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };

        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut param_grads = Vec::new();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    param_grads.push((p, g.clone()));
                }
                leaf_grads[id] = Some(g);
                continue;
            }
            let needs = |i: NodeId| nodes[i].requires_grad;
            let value = |i: NodeId| nodes[i].value.as_ref();
            for (input, gi) in node.op.backward(&g, &node.value, &value, &needs) {
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // Params are reported in tape order so accumulation order is fixed.
        param_grads.reverse();
        Ok(Gradients {
            leaf: leaf_grads,
            params: param_grads,
        })
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    leaf: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching a leaf `Var`; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaf.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Panics if the tape was consumed by `backward`.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub(crate) fn val(&self) -> Result<Rc<Tensor<T>>, AutogradError> {
        if self.tape.is_consumed() {
            return Err(AutogradError::TapeConsumed);
        }
        Ok(self.tape.value_of(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        let inner = self.tape.inner.borrow();
        match inner.nodes.get(self.id) {
            Some(n) => n.value.shape().to_vec(),
            None => Vec::new(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

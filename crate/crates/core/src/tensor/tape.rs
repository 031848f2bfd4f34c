//! Gradient tape: a topologically ordered record of primitive operations.
//!
//! Recording is confined to one logical thread per training step; a fresh
//! tape is created per step and dropped after the update. `Param` cells
//! give modules shared, mutable parameter storage while tensors themselves
//! stay immutable.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{NodeId, Tensor};
use crate::{Error, Result};

/// Backward rule: upstream gradient in, one gradient buffer per parent out.
/// Slots arrive as `None`; the rule fills every slot it has a parent for.
pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut [Option<Vec<f64>>])>;

pub(crate) struct Node {
    pub(crate) parents: Vec<NodeId>,
    pub(crate) back: Option<BackFn>,
    pub(crate) shape: Vec<usize>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    /// Param identity -> leaf node, so repeated reads of a shared parameter
    /// hit the same node and gradients accumulate there.
    watched_params: HashMap<usize, NodeId>,
}

/// Shared handle to a recording tape.
#[derive(Clone, Default)]
pub struct Tape(pub(crate) Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push(&self, node: Node) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Registers `t` as a differentiable leaf and returns the tracked copy.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            parents: vec![],
            back: None,
            shape: t.shape().to_vec(),
        });
        t.with_node(self, id)
    }

    /// Reads a parameter as a tracked leaf. Repeated reads of the same
    /// `Param` on one tape return the same node.
    pub fn param(&self, p: &Param) -> Tensor {
        let key = p.ptr_id();
        if let Some(&id) = self.0.borrow().watched_params.get(&key) {
            return p.value().with_node(self, id);
        }
        let value = p.value();
        let id = self.push(Node {
            parents: vec![],
            back: None,
            shape: value.shape().to_vec(),
        });
        self.0.borrow_mut().watched_params.insert(key, id);
        value.with_node(self, id)
    }

    fn param_nodes(&self) -> HashMap<usize, NodeId> {
        self.0.borrow().watched_params.clone()
    }
}

impl Tensor {
    /// Reverse pass from a scalar loss. Returns the gradients of every
    /// leaf (watched tensors and parameters) with respect to `self`.
    pub fn backward(&self) -> Result<Gradients> {
        let (tape, loss_id) = match &self.node {
            Some((tape, id)) => (tape.clone(), *id),
            None => return Err(Error::DetachedBackward),
        };
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }

        let inner = tape.0.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        let mut leaf_grads: HashMap<NodeId, Tensor> = HashMap::new();
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            match &node.back {
                Some(back) => {
                    let mut slots: Vec<Option<Vec<f64>>> = vec![None; node.parents.len()];
                    back(&g, &mut slots);
                    for (slot, &pid) in slots.iter_mut().zip(&node.parents) {
                        let Some(pg) = slot.take() else { continue };
                        match &mut grads[pid] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            None => grads[pid] = Some(pg),
                        }
                    }
                }
                None => {
                    let t = Tensor::from_parts(g, node.shape.clone());
                    leaf_grads.insert(id, t);
                }
            }
        }
        drop(inner);

        Ok(Gradients {
            leaf_grads,
            param_nodes: tape.param_nodes(),
        })
    }
}

/// Map from leaf handles to gradient tensors, produced by `backward`.
pub struct Gradients {
    leaf_grads: HashMap<NodeId, Tensor>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a watched leaf tensor.
    pub fn wrt(&self, leaf: &Tensor) -> Option<&Tensor> {
        let (_, id) = leaf.node.as_ref()?;
        self.leaf_grads.get(id)
    }

    /// Gradient with respect to a parameter read through `Tape::param`.
    pub fn wrt_param(&self, p: &Param) -> Option<&Tensor> {
        let id = self.param_nodes.get(&p.ptr_id())?;
        self.leaf_grads.get(id)
    }
}

/// Shared mutable cell holding one trainable parameter.
///
/// Clones alias the same storage: a module that clones another module's
/// `Param` (shared embeddings, shared output heads) sees every update made
/// through any clone, and gradient contributions from all users accumulate
/// on one tape node.
#[derive(Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self(Rc::new(RefCell::new(value.detach())))
    }

    /// Current value (cheap: storage is shared).
    pub fn value(&self) -> Tensor {
        self.0.borrow().clone()
    }

    /// Replaces the stored value, e.g. after an optimizer step.
    pub fn set(&self, value: Tensor) {
        *self.0.borrow_mut() = value.detach();
    }

    /// Reads the parameter, recording it on `tape` when one is given.
    pub fn read(&self, tape: Option<&Tape>) -> Tensor {
        match tape {
            Some(t) => t.param(self),
            None => self.value(),
        }
    }

    /// True when `other` aliases the same storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({:?})", self.0.borrow())
    }
}

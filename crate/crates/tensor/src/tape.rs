//! Reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Tape::backward`] walks it once in
//! reverse, so each node is visited exactly once. The tape is meant to be
//! dropped after the backward pass.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named model weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Gradient contributions for each parent of a node, given the upstream
/// gradient and a mask of which parents require one.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    name: Option<String>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape for inference: parameters are registered as constants, so no
    /// backward rule is ever kept.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            name: None,
        })
    }

    /// Registers a parameter as a named leaf. Frozen parameters are recorded
    /// as constants and never accumulate a gradient.
    pub fn param(&self, param: &Parameter<T>) -> Var<'_, T> {
        self.push(Node {
            value: param.value.clone(),
            requires_grad: param.trainable && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
            name: Some(param.name.clone()),
        })
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// some parent requires a gradient.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            name: None,
        })
    }

    /// Back-propagates from a scalar loss.
    ///
    /// Consumes the recorded backward rules; a second call on the same tape
    /// sees no graph and returns [`TensorError::DetachedGraph`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignTape);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad || (root.backward.is_none() && !root.parents.is_empty()) {
            return Err(TensorError::DetachedGraph);
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one())?);

        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match node.backward.take() {
                Some(backward) => {
                    let parents = node.parents.clone();
                    let mask: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let contributions = backward(&grad, &mask);
                    debug_assert_eq!(contributions.len(), parents.len());
                    for ((&p, g), needed) in parents.iter().zip(contributions).zip(mask) {
                        if let (Some(g), true) = (g, needed) {
                            debug_assert_eq!(g.shape(), nodes[p].value.shape());
                            accumulate(&mut grads[p], g);
                        }
                    }
                }
                None if node.parents.is_empty() => {
                    out.insert_leaf(id, node.name.as_deref(), grad);
                }
                // Interior node whose rule was consumed by an earlier backward.
                None => return Err(TensorError::DetachedGraph),
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    named: BTreeMap<String, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            named: BTreeMap::new(),
            leaves: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    fn insert_leaf(&mut self, id: usize, name: Option<&str>, grad: Tensor<T>) {
        if let Some(name) = name {
            match self.named.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.named.insert(name.to_string(), grad.clone());
                }
            }
        }
        self.leaves.insert(id, grad);
    }

    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Gradient of any leaf variable.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

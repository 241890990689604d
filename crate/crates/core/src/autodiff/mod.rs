//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so the node list
//! is already topologically sorted and backward is a single reverse sweep.
//! Leaves copy their values in; gradients come back out through
//! [`Gradients`] and are routed to parameter tensors by the caller.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, max_relative_error};
pub use ops::gelu_scalar;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`.
    MatMulNt { a: Var, b: Var, n: usize, k: usize, m: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Row-broadcast bias add.
    AddBias { x: Var, bias: Var },
    /// `x: [batch * seq, d]` plus `p: [seq, d]` repeated per batch entry.
    AddTiled { x: Var, p: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<T> },
    MeanPool { x: Var, seq: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. The tensor's `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a constant leaf from raw values.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        self.leaf_raw(shape, value, false)
    }

    pub(crate) fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "leaf shape {shape:?} does not match {} values",
                value.len()
            )));
        }
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn to_tensor(&self, var: Var) -> Tensor<T> {
        let n = &self.nodes[var.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub(crate) fn node(&self, var: Var) -> &Node<T> {
        &self.nodes[var.0]
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that (transitively)
    /// depend on a gradient-requiring leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                ops::backprop(self, idx, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

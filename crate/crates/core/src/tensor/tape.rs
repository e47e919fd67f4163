use std::sync::atomic::{AtomicUsize, Ordering};

use super::ops::Op;
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

pub(crate) struct Node<T: Real> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    /// Set on leaves the caller asked gradients for.
    pub requires_grad: bool,
    /// True when some requires_grad leaf lies upstream.
    pub needs_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Wengert list of the operations of one forward pass.
///
/// Nodes are appended in creation order, so the list is already
/// topologically sorted and backward is a single reverse sweep. A tape is
/// meant to be confined to one thread; build a fresh one per pass.
pub struct Tape<T: Real = f32> {
    id: usize,
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        self.var_at(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).ok().and_then(|n| n.grad.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.check(v).ok()?;
        self.nodes[v.index].grad.take()
    }

    pub(crate) fn var_at(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar(v.index));
        }
        Ok(())
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index])
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.index].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        self.var_at(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into every requires_grad leaf reachable from the
    /// loss; a leaf used twice receives the sum of both contributions.
    /// Intermediate gradients are released once propagated. Gradients from a
    /// previous backward call on the same tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.index];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.index].needs_grad {
            return Ok(());
        }
        self.nodes[loss.index].grad = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.nodes[i].op.backward(self, i, &g);
            for (input, dg) in contributions {
                let node = &mut self.nodes[input.index];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += *d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        // keep gradients on requires_grad leaves only
        for node in &mut self.nodes {
            if !node.requires_grad {
                node.grad = None;
            }
        }
        Ok(())
    }
}

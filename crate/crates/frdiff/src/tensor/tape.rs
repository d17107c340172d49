//! Wengert tape for reverse-mode differentiation.
//!
//! Operations append nodes in execution order; the backward pass walks the
//! node list in reverse exactly once, accumulating vector-Jacobian products.
//! Accumulation order is fixed by recording order, so two backward passes
//! over the same tape produce bit-identical gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Computes the gradient contribution for one input of a node, given the
/// gradient flowing into the node's output.
pub(crate) type EdgeFn = Box<dyn Fn(&[f64]) -> Vec<f64>>;

pub(crate) struct Node {
    /// Number of elements in this node's output value.
    pub len: usize,
    /// (input node id, vjp) pairs, one per tracked input.
    pub edges: Vec<(usize, EdgeFn)>,
}

/// A single-threaded gradient tape. Create one per training step or per
/// differentiable sampling trajectory.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape { nodes: RefCell::new(Vec::new()) })
    }

    /// Register a tensor as a differentiable leaf on this tape.
    pub fn watch(self: &Rc<Self>, t: &Tensor) -> Tensor {
        let id = self.push(Node { len: t.len(), edges: Vec::new() });
        Tensor::tracked(t.shape().to_vec(), t.data_arc(), self.clone(), id)
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let loss_id = loss
            .node_id()
            .ok_or_else(|| Error::contract("loss is not recorded on a tape"))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            for (input, vjp) in &nodes[id].edges {
                let contrib = vjp(&g);
                debug_assert_eq!(contrib.len(), nodes[*input].len, "vjp output size mismatch");
                match &mut grads[*input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    None => grads[*input] = Some(contrib),
                }
            }
            // keep leaf gradients; interior gradients were consumed by take()
            if nodes[id].edges.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tracked tensor, shaped like the tensor. None when the
    /// tensor did not influence the loss.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node_id()?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_vec(t.shape().to_vec(), g.clone()))
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node holding the output value, the ids of its inputs and a
//! [`Backward`] rule with whatever intermediates it saved. [`Tape::backward`]
//! sweeps the nodes in reverse creation order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Everything a backward rule can look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
    /// `needs[i]` is true when input `i` requires a gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, `None` where `needs` is false.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// Ordered record of the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            grad: None,
            inputs: Vec::new(),
            op: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.push(Node {
            value,
            requires_grad,
            grad: None,
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            op: if requires_grad { Some(Box::new(op)) } else { None },
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Name of the op that produced `v`, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Backpropagates from a one-element `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad_output: &grad_out,
                    needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                let input_grads = op.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "{}", op.name());
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad_out);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::ones(&[3]));
        let c = tape.add(a, b).unwrap();
        assert!(!tape.requires_grad(c));
        assert!(tape.op_name(c).is_none());
    }
}

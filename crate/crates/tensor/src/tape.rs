//! Operation recording and reverse-mode gradient propagation.
//!
//! Every primitive appends one node to the [`Tape`] holding its output value
//! and, when any input requires a gradient, a [`Backward`] rule. Calling
//! [`Tape::backward`] walks the nodes in exact reverse recording order.

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a recorded operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Propagates `grad_out` (same shape as the op's output) into its inputs.
    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>);
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Backward<T>>>,
}

/// Read access to forward values during backward.
pub struct Values<'a, T: Scalar> {
    nodes: &'a [Node<T>],
}

impl<T: Scalar> Values<'_, T> {
    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

/// Write access to gradient buffers during backward.
pub struct Grads<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    bufs: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Grads<'_, T> {
    /// Gradient accumulator for `v`, or `None` when `v` does not require one.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(
            self.bufs[v.0]
                .get_or_insert_with(|| vec![T::zero(); numel])
                .as_mut_slice(),
        )
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }
}

/// Linear record of a forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in recording order (`"leaf"` for inputs).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.op.as_ref().map_or("leaf", |op| op.name()))
            .collect()
    }

    /// Records an input that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, true, None)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the output of a primitive. The node requires a gradient when
    /// any of `inputs` does; otherwise the backward rule is dropped.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        self.push_node(value, requires_grad, op)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Option<Box<dyn Backward<T>>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element output with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_from(loss, vec![T::one()])
    }

    /// Backpropagates an arbitrary seed gradient from `output`.
    pub fn backward_from(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let numel = self.value(output).numel();
        if seed.len() != numel {
            return Err(TensorError::invalid(
                "backward",
                format!("seed has {} values, output has {numel}", seed.len()),
            ));
        }
        let mut bufs: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            bufs[output.0] = Some(seed);
        }
        for idx in (0..=output.0).rev() {
            let Some(op) = self.nodes[idx].op.as_ref() else {
                continue;
            };
            let Some(grad_out) = bufs[idx].take() else {
                continue;
            };
            let values = Values { nodes: &self.nodes };
            let mut grads = Grads {
                nodes: &self.nodes,
                bufs: &mut bufs,
            };
            op.backward(&grad_out, &values, &mut grads);
            bufs[idx] = Some(grad_out);
        }
        Ok(Gradients { bufs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.sigmoid(a);
        assert!(!tape.requires_grad(b));
        assert_eq!(tape.op_names(), vec!["leaf", "leaf"]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(a),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn replayed_tapes_are_identical() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.variable(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f32).sin()));
            let y = tape.relu(x);
            let z = tape.upsample2x(y).unwrap();
            let s = tape.sum(z);
            let g = tape.backward(s).unwrap();
            (tape.op_names(), tape.value(z).clone(), g.get(x).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2, b.2);
    }
}

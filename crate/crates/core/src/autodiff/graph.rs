use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Adjoint of one recorded primitive.
///
/// Given the upstream gradient of the op's output, returns one entry per
/// input: `Some` gradient for inputs that need one, `None` otherwise. The
/// `needs` slice flags which inputs require gradients so implementations can
/// skip work.
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Tape of executed primitives, in forward execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor, Vec::new(), None, requires_grad)
    }

    /// Records a constant leaf (never receives a gradient).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(false), Vec::new(), None, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(true), Vec::new(), None, true)
    }

    /// Records the output of a primitive whose adjoint is `op`.
    pub fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn Backward>) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !self.value(*v).all_finite()),
            "forward op produced non-finite values from finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs, Some(op), requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copy of the recorded value with its gradient slot populated.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient shape tracks value shape");
        }
        t
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Visits recorded ops in exact reverse order and sums contributions for
    /// values consumed more than once. A graph supports a single backward
    /// pass; a second call returns [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                if needs.iter().any(|&n| n) {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let contributions = op.backward(&upstream, &inputs, &node.value, &needs)?;
                    let targets = node.inputs.clone();
                    for (var, contrib) in targets.into_iter().zip(contributions) {
                        let Some(contrib) = contrib else { continue };
                        if !self.nodes[var.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(contrib.len(), self.nodes[var.0].value.len());
                        match &mut self.grads[var.0] {
                            Some(g) => g.iter_mut().zip(&contrib).for_each(|(g, c)| *g += c),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
            // Only leaves keep their gradient after the sweep.
            if self.nodes[idx].op.is_none() || idx == loss.0 {
                self.grads[idx] = Some(upstream);
            }
        }
        Ok(())
    }
}

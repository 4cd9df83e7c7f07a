//! Reverse-mode differentiation tape.
//!
//! A `Graph` is an append-only arena of op nodes. Construction order is the
//! topological order, so the backward pass is a single reverse scan that
//! visits every node exactly once. One graph is confined to one thread for
//! the duration of a forward/backward pass; distinct graphs are independent.

use super::conv::ConvPlan;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Middle-axis view used by broadcast, softmax, concat and narrow ops:
/// the tensor is treated as [outer, mid, inner].
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisView {
    pub outer: usize,
    pub mid: usize,
    pub inner: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MaxElem(Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    /// Broadcast ops: param indexed by the middle axis of `view`.
    BMul(Var, Var, AxisView),
    BAdd(Var, Var, AxisView),
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Option<Var>, plan: ConvPlan, cols: Vec<T> },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, kh: usize, kw: usize, stride: usize },
    UpsampleNearest { x: Var, factor: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softmax { x: Var, view: AxisView },
    Concat { xs: Vec<(Var, usize)>, view: AxisView }, // (input, mid width)
    Narrow { x: Var, view: AxisView, start: usize, len: usize },
    Reshape { x: Var },
    SumAll(Var),
    MeanAll(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<T>, inv_std: Vec<T>, frozen: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, x_hat: Vec<T>, inv_std: Vec<T> },
    CrossEntropy { p: Var, targets: Vec<usize> },
    MseLoss { a: Var, b: Var },
    BernoulliNll { p: Var, target: Tensor<T> },
    MixtureNll { pi: Var, mu: Var, log_var: Var, target: Tensor<T> },
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf. Gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Inserts a constant (non-differentiable) leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a parameter leaf (tracked).
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        self.leaf(c)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => {
                let mut g = Tensor::zeros(node.value.shape());
                g.data_mut().copy_from_slice(delta);
                node.grad = Some(g);
            }
        }
    }

    /// Runs reverse-mode accumulation from a scalar loss. Gradients of all
    /// tracked leaves (and intermediates) become available via `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                got: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing tracked downstream
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&[1]));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[3]).with_grad());
        let y = g.add(x, x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn grads_accumulate_over_multiple_uses() {
        // loss = sum(x) + sum(x) -> grad = 2 everywhere
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[4]).with_grad());
        let s1 = g.sum_all(x);
        let s2 = g.sum_all(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0).with_grad());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0).with_grad());
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum_all(xx);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.data(), &[2.0, 4.0, 6.0]);
    }
}

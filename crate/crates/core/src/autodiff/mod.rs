//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly, stores
//! its result, and records what it needs for the backward pass. [`Graph::backward`]
//! walks the tape once in reverse insertion order.

mod elementwise;
mod nn;
mod shape;

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::conv::{ConvGeom, DeconvGeom};
use crate::kernels::norm::BatchNormSaved;
use crate::kernels::routing::{RouteDims, RouteTrace};
use crate::real::Real;
use crate::tensor::Tensor;

pub use elementwise::{BinaryOp, UnaryOp};
pub use nn::{BatchNormMode, RunningStats};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Unary {
        kind: UnaryOp,
        x: Var,
    },
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Reduce {
        x: Var,
        axes: Vec<usize>,
        mean: bool,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Norm {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: DeconvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Resize {
        x: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Route {
        pred: Var,
        dims: RouteDims,
        trace: RouteTrace<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The differentiation tape. Rebuilt for every forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Records an input. Gradients are collected for it when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("gradient shape matches value"))
    }

    /// Clears gradients so that `backward` may be called again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Back-propagates from a single-element `loss`, populating gradients of every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Accumulation);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contributions = self.node_backward(&nodes, node, &g)?;
            for (var, delta) in contributions {
                if !nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    fn node_backward(&self, nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary { kind, x } => vec![(*x, elementwise::unary_backward(*kind, val(*x), &node.value, g))],
            Op::Binary { kind, a, b } => elementwise::binary_backward(*kind, (*a, val(*a)), (*b, val(*b)), g, &wants),
            Op::MatMul { a, b } => shape::matmul_backward((*a, val(*a)), (*b, val(*b)), g, &wants),
            Op::Reduce { x, axes, mean } => vec![(*x, shape::reduce_backward(val(*x).shape(), axes, *mean, g))],
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(*v).shape()).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(shape::concat_backward(&shapes, *axis, g))
                    .collect()
            }
            Op::Softmax { x, axis } => vec![(*x, nn::softmax_backward(&node.value, *axis, g))],
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                vec![(*logits, nn::xent_backward(probs, labels, val(*logits).shape(), g[0]))]
            }
            Op::Norm { x, axis } => vec![(*x, shape::norm_backward(val(*x), &node.value, *axis, g))],
            Op::Conv2d { x, w, bias, geom } => nn::conv2d_backward(geom, (*x, val(*x)), (*w, val(*w)), *bias, g, &wants),
            Op::ConvTranspose2d { x, w, bias, geom } => {
                nn::deconv_backward(geom, (*x, val(*x)), (*w, val(*w)), *bias, g, &wants)
            }
            Op::MaxPool { x, argmax } => vec![(*x, crate::kernels::pool::maxpool2d_backward(g, argmax, val(*x).len()))],
            Op::BatchNorm { x, gamma, beta, saved } => {
                nn::batchnorm_backward((*x, val(*x)), (*gamma, val(*gamma)), *beta, saved, g)
            }
            Op::Resize { x, from, to } => {
                let s = val(*x).shape();
                let planes = s[0] * s[1];
                vec![(*x, crate::kernels::resize::bilinear_backward(g, planes, *from, *to))]
            }
            Op::Route { pred, dims, trace } => {
                vec![(*pred, crate::kernels::routing::route_backward(dims, val(*pred).data(), trace, g))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_cosh_derivative_is_tanh() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let c = g.cosh(x);
        let y = g.log(c).unwrap();
        g.backward(y).unwrap();
        let d = g.grad(x).unwrap().data()[0];
        assert!((d - 0.761594).abs() < 1e-6, "{d}");
        assert!((d - 1f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Accumulation)));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = x·x + x, df/dx = 2x + 1
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let xx = g.mul(x, x).unwrap();
        let f = g.add(xx, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }
}

//! A small tape-based reverse-mode differentiation engine over [`Tensor`]s.
//!
//! Building an expression records one node per op on a [`Graph`]. Every
//! node keeps its forward value; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! trainable leaf.
//!
//! ```
//! use debclust::autodiff::Graph;
//! use debclust::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod ops;

use std::sync::Arc;

pub use gradcheck::{finite_diff_grad, finite_diff_wrt, GradCheck};
pub use ops::{channel_moments, gelu_grad_scalar, gelu_scalar};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::{BatchStats, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The recorded computation: op records plus the value of every node.
/// Nodes are stored in creation order, so the tape is topologically sorted.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    tracked: Vec<bool>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient of the loss w.r.t. `node`; zeros when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.grads[node.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.tracked.push(requires_grad);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.values[node.0].shape()
    }

    /// Leaf node ids in creation order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = ops::forward(&op, &self.values)?;
        let tracked = op.inputs().iter().any(|i| self.tracked[i.0]);
        self.ops.push(op);
        self.values.push(value);
        self.tracked.push(tracked);
        Ok(NodeId(self.ops.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    /// Elementwise `a^b` with broadcasting; `a` must be positive.
    pub fn pow(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Pow(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.push(Op::PowScalar(a, p))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// `max(a, c)` elementwise.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::MaxScalar(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::domain("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    /// Per-channel batch normalization of `[N, C, ...]` using the batch's own
    /// (biased) statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            stats: BatchStats::Batch,
        })
    }

    /// Batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            stats: BatchStats::Running {
                mean: Arc::new(running_mean.to_vec()),
                var: Arc::new(running_var.to_vec()),
            },
        })
    }

    /// Multiplies by a fixed per-element scale (0 for dropped units,
    /// `1/(1-p)` for kept ones).
    pub fn dropout(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Dropout {
            x,
            scale: Arc::new(scale),
        })
    }

    /// Depthwise `k x k` convolution with zero "same" padding.
    /// `x: [N, C, H, W]`, `w: [C, k, k]`.
    pub fn depthwise_conv(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::DepthwiseConv { x, w })
    }

    /// 1x1 convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin]`.
    pub fn pointwise_conv(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::PointwiseConv { x, w })
    }

    /// Non-overlapping `p x p` patch convolution (kernel = stride = p).
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, p, p]`.
    pub fn patch_conv(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::PatchConv { x, w })
    }

    /// Recomputes every node with the leaves bound to `inputs` (in leaf
    /// creation order). Reproduces the recorded values exactly when given the
    /// recorded leaf values.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let leaves = self.leaves();
        if leaves.len() != inputs.len() {
            return Err(Error::invalid(format!(
                "replay needs {} leaf values, got {}",
                leaves.len(),
                inputs.len()
            )));
        }
        let overrides: Vec<(NodeId, Tensor)> = leaves.into_iter().zip(inputs.iter().cloned()).collect();
        self.replay_with(&overrides)
    }

    /// Recomputes every node, replacing the value of selected leaves.
    pub fn replay_with(&self, overrides: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Leaf => {
                    match overrides.iter().find(|(id, _)| id.0 == i) {
                        Some((_, t)) => {
                            if t.shape() != self.values[i].shape() {
                                return Err(Error::shape("replay", self.values[i].shape(), t.shape()));
                            }
                            t.clone()
                        }
                        None => self.values[i].clone(),
                    }
                }
                _ => ops::forward(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Value of `output` when the leaves are bound to `inputs`.
    pub fn forward(&self, inputs: &[Tensor], output: NodeId) -> Result<Tensor> {
        Ok(self.replay(inputs)?.swap_remove(output.0))
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(Error::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            if matches!(op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let inputs = op.inputs();
            let local = ops::backward(op, &self.values, &self.values[i], &g);
            for (inp, gi) in inputs.into_iter().zip(local) {
                if !self.tracked[inp.0] {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
            // Interior gradients are not kept; only leaves are reported.
        }
        grads.resize(self.values.len(), None);
        Ok(GradMap {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }
}

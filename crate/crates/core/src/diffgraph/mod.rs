//! Reverse-mode differentiation over the small set of operations needed to
//! unroll the reconstruction solvers and the straight-through mask sampler.
//!
//! Computations are written once against the [`Graph`] trait and run on one
//! of two backends:
//!
//! - [`Tape`] records every operation (define-by-run) so that
//!   [`Tape::backward`] can propagate adjoints from a scalar loss;
//! - [`Eager`] evaluates the same operations without keeping history, for
//!   test-time evaluation of long unrolls.
//!
//! All arithmetic is `f64`. Any operation producing a NaN or infinity fails
//! with [`Error::NonFinite`](crate::Error::NonFinite).

pub(crate) mod circular;
pub(crate) mod kernels;
mod ops;
mod tensor;

use std::fmt::Debug;
use std::rc::Rc;
use std::sync::Arc;

pub use ops::OpKind;
use ops::Saved;
pub use tensor::Tensor;

use crate::gumbel::Partition;
use crate::{Error, Result};

/// A fixed linear map applied independently to every row.
pub trait LinearMap: Send + Sync + Debug {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply_row(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`; `out` arrives zeroed.
    fn adjoint_row(&self, y: &[f64], out: &mut [f64]);
}

/// Backend-agnostic operation set.
///
/// Row-wise operations (`hard_threshold`, `softmax_tau`, `median_select`,
/// `linear`, `circ_conv`) treat a rank-2 tensor as a batch of independent
/// rows.
pub trait Graph {
    type Var: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    #[doc(hidden)]
    fn record(&mut self, kind: OpKind, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::MatMul { ta: false, tb: false }, &[a, b])
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    fn matmul_t(&mut self, a: &Self::Var, ta: bool, b: &Self::Var, tb: bool) -> Result<Self::Var> {
        self.record(OpKind::MatMul { ta, tb }, &[a, b])
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Mul, &[a, b])
    }

    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Sum, &[a])
    }

    fn scalar_mul(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var> {
        self.record(OpKind::Scale(c), &[a])
    }

    /// Multiplies `a` by a scalar node `s`.
    fn mul_scalar(&mut self, s: &Self::Var, a: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::MulScalar, &[s, a])
    }

    /// Multiplies every row of `a` elementwise by `r`.
    fn mul_rows(&mut self, a: &Self::Var, r: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::MulRows, &[a, r])
    }

    fn exp(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Exp, &[a])
    }

    fn soft_threshold(&mut self, v: &Self::Var, lambda: f64) -> Result<Self::Var> {
        self.record(OpKind::SoftThreshold(lambda), &[v])
    }

    /// Soft thresholding with a scalar threshold node that receives gradients.
    fn soft_threshold_learned(&mut self, v: &Self::Var, lambda: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::SoftThresholdLearned, &[v, lambda])
    }

    fn hard_threshold(&mut self, v: &Self::Var, s: usize) -> Result<Self::Var> {
        self.record(OpKind::HardThreshold(s), &[v])
    }

    fn softmax_tau(&mut self, v: &Self::Var, tau: f64) -> Result<Self::Var> {
        self.record(OpKind::Softmax(tau), &[v])
    }

    /// `out_j = median{ y_i : i ∈ groups[j] }`, lower median for even sizes.
    fn median_select(&mut self, y: &Self::Var, groups: &Arc<Vec<Vec<usize>>>) -> Result<Self::Var> {
        self.record(OpKind::Median(groups.clone()), &[y])
    }

    fn relu_nonneg(&mut self, v: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Relu, &[v])
    }

    fn clamp(&mut self, v: &Self::Var, lo: f64, hi: f64) -> Result<Self::Var> {
        if lo > hi {
            return Err(Error::param("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        self.record(OpKind::Clamp(lo, hi), &[v])
    }

    /// `min(v, 1)`; the adjoint passes only where `v < 1`.
    fn min_one(&mut self, v: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::MinOne, &[v])
    }

    fn abs_sum(&mut self, v: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::AbsSum, &[v])
    }

    fn sq_sum(&mut self, v: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::SqSum, &[v])
    }

    /// Straight-through top-`d` per partition subset: the forward value is
    /// the hard indicator (or the softmax surrogate when `relaxed`), the
    /// backward pass is always the softmax Jacobian.
    fn topk_straight_through(
        &mut self,
        logits: &Self::Var,
        partition: &Arc<Partition>,
        tau: f64,
        relaxed: bool,
    ) -> Result<Self::Var> {
        self.record(OpKind::TopK { partition: partition.clone(), tau, relaxed }, &[logits])
    }

    /// Circular convolution (or correlation) of kernel `c` with each row of `x`.
    fn circ_conv(&mut self, c: &Self::Var, x: &Self::Var, correlate: bool) -> Result<Self::Var> {
        self.record(OpKind::CircConv { correlate }, &[c, x])
    }

    fn linear(&mut self, map: &Arc<dyn LinearMap>, x: &Self::Var) -> Result<Self::Var> {
        self.record(OpKind::Linear(map.clone()), &[x])
    }

    fn select_row(&mut self, a: &Self::Var, row: usize) -> Result<Self::Var> {
        self.record(OpKind::SelectRow(row), &[a])
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: OpKind,
    inputs: Vec<usize>,
    saved: Saved,
}

/// Define-by-run record of one forward pass.
///
/// Node ids are assigned in creation order, so the inputs of every entry
/// have smaller ids than its output and a reverse sweep is a valid
/// topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input (a parameter or data the caller wants adjoints for).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node { value: t, kind: OpKind::Leaf, inputs: Vec::new(), saved: Saved::None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Propagates adjoints from the scalar `output` to every recorded node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::dim("backward", format!("output must be scalar, got {:?}", out.value.shape())));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::filled(out.value.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let grads = ops::backward(&node.kind, &inputs, &node.value, &node.saved, &g)?;
                for (&i, dg) in node.inputs.iter().zip(grads) {
                    let Some(dg) = dg else { continue };
                    match &mut adj[i] {
                        Some(acc) => acc.add_assign(&dg),
                        slot => *slot = Some(dg),
                    }
                }
            }
            adj[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adj, shapes })
    }
}

impl Graph for Tape {
    type Var = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn record(&mut self, kind: OpKind, inputs: &[&NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, saved) = ops::forward(&kind, &values)?;
        let inputs = inputs.iter().map(|id| id.0).collect();
        self.nodes.push(Node { value, kind, inputs, saved });
        Ok(NodeId(self.nodes.len() - 1))
    }
}

/// Accumulated adjoints of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`; zero when the backward pass never reached it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.adj[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

/// History-free backend: every operation is evaluated immediately.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Var = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn record(&mut self, kind: OpKind, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let values: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        let (value, _) = ops::forward(&kind, &values)?;
        Ok(Rc::new(value))
    }
}

/// Hard top-K indicator and surrogate probabilities outside any graph.
pub(crate) fn ops_topk(partition: &Partition, logits: &Tensor, tau: f64) -> Result<(Tensor, Vec<f64>)> {
    ops::topk_forward(partition, logits, tau, false)
}

#[cfg(test)]
mod tests;

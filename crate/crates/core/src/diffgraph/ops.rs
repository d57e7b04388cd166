use std::sync::Arc;

use super::circular::{circ_rows, summed_row_correlation};
use super::kernels::{self, View};
use super::{LinearMap, Tensor};
use crate::gumbel::Partition;
use crate::{Error, Result};

/// Operation recorded on a tape. Inputs are passed separately.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Sum,
    Scale(f64),
    MulScalar,
    MulRows,
    Exp,
    SoftThreshold(f64),
    SoftThresholdLearned,
    HardThreshold(usize),
    Softmax(f64),
    Median(Arc<Vec<Vec<usize>>>),
    Relu,
    Clamp(f64, f64),
    MinOne,
    AbsSum,
    SqSum,
    TopK { partition: Arc<Partition>, tau: f64, relaxed: bool },
    CircConv { correlate: bool },
    Linear(Arc<dyn LinearMap>),
    SelectRow(usize),
}

impl OpKind {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Scale(_) => "scalar_mul",
            OpKind::MulScalar => "mul_scalar",
            OpKind::MulRows => "mul_rows",
            OpKind::Exp => "exp",
            OpKind::SoftThreshold(_) | OpKind::SoftThresholdLearned => "soft_threshold",
            OpKind::HardThreshold(_) => "hard_threshold",
            OpKind::Softmax(_) => "softmax_tau",
            OpKind::Median(_) => "median_select",
            OpKind::Relu => "relu_nonneg",
            OpKind::Clamp(..) => "clamp",
            OpKind::MinOne => "min_one",
            OpKind::AbsSum => "abs_sum",
            OpKind::SqSum => "sq_sum",
            OpKind::TopK { .. } => "straight_through_topk",
            OpKind::CircConv { .. } => "circ_conv",
            OpKind::Linear(_) => "linear",
            OpKind::SelectRow(_) => "select_row",
        }
    }
}

/// Forward values kept for the backward pass beyond the node values.
#[derive(Debug, Default)]
pub enum Saved {
    #[default]
    None,
    Flags(Vec<bool>),
    Indices(Vec<usize>),
    Probs(Vec<f64>),
}

fn scalar_of(op: &'static str, t: &Tensor) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::dim(op, format!("expected a scalar, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

fn check_row_len(op: &'static str, a: &Tensor, len: usize) -> Result<()> {
    if a.cols() != len {
        return Err(Error::dim(op, format!("row length {} vs {len}", a.cols())));
    }
    Ok(())
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let out = match kind {
        OpKind::Leaf => unreachable!("leaves are created directly"),
        OpKind::MatMul { ta, tb } => kernels::matmul(inputs[0], *ta, inputs[1], *tb)?,
        OpKind::Add => {
            kernels::same_shape("add", inputs[0], inputs[1])?;
            kernels::zip(inputs[0], inputs[1], |a, b| a + b)
        }
        OpKind::Sub => {
            kernels::same_shape("sub", inputs[0], inputs[1])?;
            kernels::zip(inputs[0], inputs[1], |a, b| a - b)
        }
        OpKind::Mul => {
            kernels::same_shape("mul", inputs[0], inputs[1])?;
            kernels::zip(inputs[0], inputs[1], |a, b| a * b)
        }
        OpKind::Sum => Tensor::scalar(inputs[0].sum()),
        OpKind::Scale(c) => inputs[0].map(|v| v * c),
        OpKind::MulScalar => {
            let s = scalar_of("mul_scalar", inputs[0])?;
            inputs[1].map(|v| v * s)
        }
        OpKind::MulRows => {
            let (a, r) = (inputs[0], inputs[1]);
            check_row_len("mul_rows", a, r.len())?;
            let mut out = a.clone();
            for i in 0..a.rows() {
                for (o, w) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o *= w;
                }
            }
            out
        }
        OpKind::Exp => inputs[0].map(f64::exp),
        OpKind::SoftThreshold(lambda) => {
            if !(*lambda >= 0.0) {
                return Err(Error::param("soft_threshold", format!("lambda {lambda} must be >= 0")));
            }
            inputs[0].map(|v| kernels::soft_threshold_value(v, *lambda))
        }
        OpKind::SoftThresholdLearned => {
            let lambda = scalar_of("soft_threshold", inputs[1])?;
            if !(lambda >= 0.0) {
                return Err(Error::param("soft_threshold", format!("lambda {lambda} must be >= 0")));
            }
            inputs[0].map(|v| kernels::soft_threshold_value(v, lambda))
        }
        OpKind::HardThreshold(s) => {
            let (out, kept) = kernels::hard_threshold(inputs[0], *s)?;
            return Ok((out.ensure_finite("hard_threshold")?, Saved::Flags(kept)));
        }
        OpKind::Softmax(tau) => kernels::softmax(inputs[0], *tau)?,
        OpKind::Median(groups) => {
            let (out, sel) = kernels::median_select(inputs[0], groups)?;
            return Ok((out.ensure_finite("median_select")?, Saved::Indices(sel)));
        }
        OpKind::Relu => inputs[0].map(|v| v.max(0.0)),
        OpKind::Clamp(lo, hi) => inputs[0].map(|v| v.clamp(*lo, *hi)),
        OpKind::MinOne => inputs[0].map(|v| v.min(1.0)),
        OpKind::AbsSum => Tensor::scalar(inputs[0].data().iter().map(|v| v.abs()).sum()),
        OpKind::SqSum => Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum()),
        OpKind::TopK { partition, tau, relaxed } => {
            let (out, probs) = topk_forward(partition, inputs[0], *tau, *relaxed)?;
            return Ok((out, Saved::Probs(probs)));
        }
        OpKind::CircConv { correlate } => {
            let c = inputs[0];
            if c.rank() > 1 && c.rows() != 1 {
                return Err(Error::dim("circ_conv", "kernel must be a single row"));
            }
            circ_rows(c.data(), inputs[1], *correlate)?
        }
        OpKind::Linear(map) => {
            let x = inputs[0];
            check_row_len("linear", x, map.input_len())?;
            let shape = if x.rank() == 2 { vec![x.rows(), map.output_len()] } else { vec![map.output_len()] };
            let mut out = Tensor::zeros(&shape);
            for r in 0..x.rows() {
                map.apply_row(x.row(r), out.row_mut(r));
            }
            out
        }
        OpKind::SelectRow(i) => {
            let a = inputs[0];
            if a.rank() != 2 || *i >= a.rows() {
                return Err(Error::dim("select_row", format!("row {i} of shape {:?}", a.shape())));
            }
            Tensor::vector(a.row(*i).to_vec())
        }
    };
    Ok((out.ensure_finite(kind.name())?, Saved::None))
}

/// Hard top-`d` indicator per subset; also returns the softmax surrogate
/// probabilities laid out like the logits.
pub(crate) fn topk_forward(
    partition: &Partition,
    logits: &Tensor,
    tau: f64,
    relaxed: bool,
) -> Result<(Tensor, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::param("straight_through_topk", format!("temperature {tau} must be positive")));
    }
    if logits.len() != partition.grid_len() {
        return Err(Error::dim(
            "straight_through_topk",
            format!("logits have {} entries, partition covers {}", logits.len(), partition.grid_len()),
        ));
    }
    let src = logits.data();
    let mut hard = Tensor::zeros(logits.shape());
    let mut probs = vec![0.0; src.len()];
    let mut buf = Vec::new();
    let mut p = Vec::new();
    for (subset, &keep) in partition.subsets().iter().zip(partition.keep_counts()) {
        buf.clear();
        buf.extend(subset.iter().map(|&i| src[i] / tau));
        p.resize(buf.len(), 0.0);
        kernels::softmax_row(&buf, 1.0, &mut p);
        for (&i, &pi) in subset.iter().zip(&p) {
            probs[i] = pi;
        }
        for pos in kernels::top_k_indices(buf.iter().copied(), keep) {
            hard.data_mut()[subset[pos]] = 1.0;
        }
    }
    if relaxed {
        let soft = Tensor::new(logits.shape().to_vec(), probs.clone())?;
        return Ok((soft.ensure_finite("straight_through_topk")?, probs));
    }
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "straight_through_topk" });
    }
    Ok((hard, probs))
}

fn sum_rows(g: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (a, v) in acc.iter_mut().zip(g.row(r)) {
            *a += v;
        }
    }
    acc
}

/// Adjoints for each input given the upstream adjoint `g` of the output.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let grads = match kind {
        OpKind::Leaf => vec![],
        OpKind::MatMul { ta, tb } => {
            let (a, b) = (inputs[0], inputs[1]);
            let va = View::of(a, true, *ta);
            let vb = View::of(b, false, *tb);
            let vg = View { data: g.data(), rows: va.rows, cols: vb.cols, rs: vb.cols as isize, cs: 1 };
            let mut da = Tensor::zeros(a.shape());
            let mut db = Tensor::zeros(b.shape());
            if *ta {
                kernels::gemm(vb, vg.t(), 0.0, da.data_mut());
            } else {
                kernels::gemm(vg, vb.t(), 0.0, da.data_mut());
            }
            if *tb {
                kernels::gemm(vg.t(), va, 0.0, db.data_mut());
            } else {
                kernels::gemm(va.t(), vg, 0.0, db.data_mut());
            }
            vec![Some(da), Some(db)]
        }
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        OpKind::Mul => vec![
            Some(kernels::zip(g, inputs[1], |x, y| x * y)),
            Some(kernels::zip(g, inputs[0], |x, y| x * y)),
        ],
        OpKind::Sum => {
            let s = g.item();
            vec![Some(Tensor::filled(inputs[0].shape(), s))]
        }
        OpKind::Scale(c) => vec![Some(g.map(|v| v * c))],
        OpKind::MulScalar => {
            let s = inputs[0].item();
            let ds = g.dot(inputs[1]);
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), vec![ds])?), Some(g.map(|v| v * s))]
        }
        OpKind::MulRows => {
            let (a, r) = (inputs[0], inputs[1]);
            let mut da = g.clone();
            for i in 0..a.rows() {
                for (o, w) in da.row_mut(i).iter_mut().zip(r.data()) {
                    *o *= w;
                }
            }
            let dr = sum_rows(&kernels::zip(g, a, |x, y| x * y));
            vec![Some(da), Some(Tensor::new(r.shape().to_vec(), dr)?)]
        }
        OpKind::Exp => vec![Some(kernels::zip(g, output, |x, y| x * y))],
        OpKind::SoftThreshold(lambda) => {
            vec![Some(kernels::zip(g, inputs[0], |gi, v| if v.abs() > *lambda { gi } else { 0.0 }))]
        }
        OpKind::SoftThresholdLearned => {
            let lambda = inputs[1].item();
            let v = inputs[0];
            let dv = kernels::zip(g, v, |gi, x| if x.abs() > lambda { gi } else { 0.0 });
            let dl: f64 = g
                .data()
                .iter()
                .zip(v.data())
                .filter(|(_, x)| x.abs() > lambda)
                .map(|(gi, x)| -x.signum() * gi)
                .sum();
            vec![Some(dv), Some(Tensor::new(inputs[1].shape().to_vec(), vec![dl])?)]
        }
        OpKind::HardThreshold(_) => {
            let Saved::Flags(kept) = saved else { unreachable!() };
            let data = g.data().iter().zip(kept).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
        }
        OpKind::Softmax(tau) => {
            let mut dv = Tensor::zeros(g.shape());
            for r in 0..g.rows() {
                let mut buf = vec![0.0; g.cols()];
                kernels::softmax_vjp(output.row(r), g.row(r), *tau, &mut buf);
                dv.row_mut(r).copy_from_slice(&buf);
            }
            vec![Some(dv)]
        }
        OpKind::Median(_) => {
            let Saved::Indices(sel) = saved else { unreachable!() };
            let mut dy = Tensor::zeros(inputs[0].shape());
            for (&idx, &gv) in sel.iter().zip(g.data()) {
                dy.data_mut()[idx] += gv;
            }
            vec![Some(dy)]
        }
        OpKind::Relu => vec![Some(kernels::zip(g, inputs[0], |gi, v| if v > 0.0 { gi } else { 0.0 }))],
        OpKind::Clamp(lo, hi) => {
            vec![Some(kernels::zip(g, inputs[0], |gi, v| if v > *lo && v < *hi { gi } else { 0.0 }))]
        }
        OpKind::MinOne => vec![Some(kernels::zip(g, inputs[0], |gi, v| if v < 1.0 { gi } else { 0.0 }))],
        OpKind::AbsSum => {
            let s = g.item();
            vec![Some(inputs[0].map(|v| if v == 0.0 { 0.0 } else { v.signum() * s }))]
        }
        OpKind::SqSum => {
            let s = g.item();
            vec![Some(inputs[0].map(|v| 2.0 * v * s))]
        }
        OpKind::TopK { partition, tau, .. } => {
            let Saved::Probs(probs) = saved else { unreachable!() };
            let mut dl = Tensor::zeros(inputs[0].shape());
            let (gd, dd) = (g.data(), dl.data_mut());
            let mut p = Vec::new();
            let mut gs = Vec::new();
            let mut out = Vec::new();
            for subset in partition.subsets() {
                p.clear();
                gs.clear();
                p.extend(subset.iter().map(|&i| probs[i]));
                gs.extend(subset.iter().map(|&i| gd[i]));
                out.clear();
                out.resize(subset.len(), 0.0);
                kernels::softmax_vjp(&p, &gs, *tau, &mut out);
                for (&i, &v) in subset.iter().zip(&out) {
                    dd[i] += v;
                }
            }
            vec![Some(dl)]
        }
        OpKind::CircConv { correlate } => {
            let (c, x) = (inputs[0], inputs[1]);
            let dx = circ_rows(c.data(), g, !correlate)?;
            let dc = if *correlate {
                summed_row_correlation(g, x)?
            } else {
                summed_row_correlation(x, g)?
            };
            vec![Some(Tensor::new(c.shape().to_vec(), dc)?), Some(dx)]
        }
        OpKind::Linear(map) => {
            let x = inputs[0];
            let mut dx = Tensor::zeros(x.shape());
            for r in 0..g.rows() {
                map.adjoint_row(g.row(r), dx.row_mut(r));
            }
            vec![Some(dx)]
        }
        OpKind::SelectRow(i) => {
            let mut da = Tensor::zeros(inputs[0].shape());
            da.row_mut(*i).copy_from_slice(g.data());
            vec![Some(da)]
        }
    };
    Ok(grads)
}

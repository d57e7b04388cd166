//! Forward kernels shared by the recording tape and the eager backend.

use super::Tensor;
use crate::{Error, Result};

/// Row-major matrix view with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    /// Views `t` as a matrix. Rank-1 tensors are rows on the left of a
    /// product and columns on the right.
    pub fn of(t: &'a Tensor, left: bool, transpose: bool) -> Self {
        let (r, c) = match t.rank() {
            0 => (1, 1),
            1 if left => (1, t.len()),
            1 => (t.len(), 1),
            _ => (t.rows(), t.cols()),
        };
        if transpose {
            View { data: t.data(), rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            View { data: t.data(), rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `out = a · b + beta · out` where `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views cover exactly the buffers they were built from and
    // `out` holds m*n contiguous values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0 {
        return Err(Error::dim("matmul", "operands must be rank 1 or 2"));
    }
    let va = View::of(a, true, ta);
    let vb = View::of(b, false, tb);
    if va.cols != vb.rows {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions {}x{} · {}x{}", va.rows, va.cols, vb.rows, vb.cols),
        ));
    }
    let mut shape = Vec::with_capacity(2);
    if a.rank() == 2 {
        shape.push(va.rows);
    }
    if b.rank() == 2 {
        shape.push(vb.cols);
    }
    let mut out = Tensor::zeros(&shape);
    gemm(va, vb, 0.0, out.data_mut());
    Ok(out)
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub(crate) fn soft_threshold_value(v: f64, lambda: f64) -> f64 {
    let mag = v.abs() - lambda;
    if mag > 0.0 {
        v.signum() * mag
    } else {
        0.0
    }
}

/// Indices of the `k` largest values, ties broken towards the lower index.
pub(crate) fn top_k_indices(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = values.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Keeps the `s` largest magnitudes of every row; returns the kept flags.
pub(crate) fn hard_threshold(v: &Tensor, s: usize) -> Result<(Tensor, Vec<bool>)> {
    let n = v.cols();
    if s == 0 || s > n {
        return Err(Error::param("hard_threshold", format!("s={s} outside 1..={n}")));
    }
    let mut out = Tensor::zeros(v.shape());
    let mut kept = vec![false; v.len()];
    for r in 0..v.rows() {
        let row = v.row(r);
        for i in top_k_indices(row.iter().map(|x| x.abs()), s) {
            out.row_mut(r)[i] = row[i];
            kept[r * n + i] = true;
        }
    }
    Ok((out, kept))
}

pub(crate) fn softmax_row(v: &[f64], tau: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) / tau).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Vector-Jacobian product of a temperature softmax: `p ⊙ (g − ⟨p, g⟩) / τ`.
pub(crate) fn softmax_vjp(p: &[f64], g: &[f64], tau: f64, out: &mut [f64]) {
    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o += pi * (gi - inner) / tau;
    }
}

pub(crate) fn softmax(v: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::param("softmax_tau", format!("temperature {tau} must be positive")));
    }
    let mut out = Tensor::zeros(v.shape());
    for r in 0..v.rows() {
        let (src, dst) = (v.row(r), r);
        let mut buf = vec![0.0; src.len()];
        softmax_row(src, tau, &mut buf);
        out.row_mut(dst).copy_from_slice(&buf);
    }
    Ok(out)
}

/// Index (into `values`) of the lower median, ties to the lowest index.
pub(crate) fn median_index(values: &[f64], group: &[usize], scratch: &mut Vec<f64>) -> usize {
    scratch.clear();
    scratch.extend(group.iter().map(|&i| values[i]));
    let k = (scratch.len() - 1) / 2;
    let (_, med, _) = scratch.select_nth_unstable_by(k, f64::total_cmp);
    let med = *med;
    group
        .iter()
        .copied()
        .filter(|&i| values[i].total_cmp(&med).is_eq())
        .min()
        .expect("median value comes from the group")
}

/// Row-wise median selection; returns the output and the selected flat
/// input index for every output entry.
pub(crate) fn median_select(y: &Tensor, groups: &[Vec<usize>]) -> Result<(Tensor, Vec<usize>)> {
    let m = y.cols();
    for (j, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Structure(format!("median group {j} is empty")));
        }
        if let Some(&bad) = g.iter().find(|&&i| i >= m) {
            return Err(Error::dim("median_select", format!("group {j} references row {bad} >= {m}")));
        }
    }
    let n = groups.len();
    let shape = if y.rank() == 2 { vec![y.rows(), n] } else { vec![n] };
    let mut out = Tensor::zeros(&shape);
    let mut selected = Vec::with_capacity(y.rows() * n);
    let mut scratch = Vec::new();
    for r in 0..y.rows() {
        let row = y.row(r);
        for (j, g) in groups.iter().enumerate() {
            let i = median_index(row, g, &mut scratch);
            out.row_mut(r)[j] = row[i];
            selected.push(r * m + i);
        }
    }
    Ok((out, selected))
}

//! FFT-backed circular convolution and correlation of real rows.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Tensor;
use crate::{Error, Result};

/// Largest tolerated imaginary residue after the inverse transform,
/// relative to `1 + max |output|`.
const IMAG_RESIDUE_TOL: f64 = 1e-9;

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<Plan>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize) -> Arc<Plan> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        if let Some(p) = cache.get(&n) {
            return p.clone();
        }
        let p = Arc::new(Plan { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) });
        cache.insert(n, p.clone());
        p
    })
}

fn spectrum(plan: &Plan, row: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward.process(&mut buf);
    buf
}

/// Row-wise circular convolution `c ⊛ x` (or correlation `c ⋆ x` when
/// `correlate` is set) of one length-`n` kernel against every row of `x`.
///
/// Convolution: `z_k = Σ_j c_j x_{(k−j) mod n}`.
/// Correlation: `z_k = Σ_j c_j x_{(k+j) mod n}`.
pub(crate) fn circ_rows(c: &[f64], x: &Tensor, correlate: bool) -> Result<Tensor> {
    let n = c.len();
    if x.cols() != n || n == 0 {
        return Err(Error::dim("circ_conv", format!("kernel length {n} vs row length {}", x.cols())));
    }
    let p = plan(n);
    let mut fc = spectrum(&p, c);
    if correlate {
        fc.iter_mut().for_each(|v| *v = v.conj());
    }
    let mut out = Tensor::zeros(x.shape());
    let scale = 1.0 / n as f64;
    for r in 0..x.rows() {
        let mut buf = spectrum(&p, x.row(r));
        for (b, f) in buf.iter_mut().zip(&fc) {
            *b *= f;
        }
        p.inverse.process(&mut buf);
        let dst = out.row_mut(r);
        let mut max_re = 0.0f64;
        let mut max_im = 0.0f64;
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re * scale;
            max_re = max_re.max(d.abs());
            max_im = max_im.max((b.im * scale).abs());
        }
        if max_im > IMAG_RESIDUE_TOL * (1.0 + max_re) {
            return Err(Error::Structure(format!(
                "circular product left imaginary residue {max_im:e} on real input"
            )));
        }
    }
    Ok(out)
}

/// Row-wise correlation `a_r ⋆ b_r` summed over rows; the gradient of a
/// convolution with respect to its kernel.
pub(crate) fn summed_row_correlation(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let n = a.cols();
    let p = plan(n);
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..a.rows() {
        let fa = spectrum(&p, a.row(r));
        let fb = spectrum(&p, b.row(r));
        for ((s, x), y) in acc.iter_mut().zip(&fa).zip(&fb) {
            *s += x.conj() * y;
        }
    }
    p.inverse.process(&mut acc);
    Ok(acc.iter().map(|v| v.re / n as f64).collect())
}

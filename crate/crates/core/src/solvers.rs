//! Unrolled reconstruction solvers.
//!
//! Every solver is a fixed number of iterations written against [`Graph`],
//! so one implementation serves both training (gradients flow to the mask
//! and to the learnable step sizes and thresholds) and evaluation. Each run
//! returns the full iterate trace; its last element is the reconstruction.
//!
//! Iterative hard thresholding and the scalar-LISTA variant work in the
//! coefficient domain of a sparsifying transform Ψ with forward model
//! `A = Φ Ψ*`. The median variants replace `Aᵀ` with the expander median
//! operator and use no transform. NNLAD is a Chambolle–Pock primal-dual
//! iteration for `min_{x ≥ 0} ‖Φx − y‖₁`:
//!
//! ```text
//! x⁺ = max(x − τ Φᵀw, 0)
//! w⁺ = clamp(w + σ (Φ(2x⁺ − x) − y), −1, 1)
//! ```
//!
//! which converges when `σ τ ‖Φ‖² < 1`.

use std::fmt;
use std::str::FromStr;

use crate::diffgraph::{Graph, Tensor};
use crate::operators::Operator;
use crate::transforms::Transform;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Iht,
    ListaScalar,
    EIht,
    EListaScalar,
    Nnlad,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Iht => "iht",
            SolverKind::ListaScalar => "lista_scalar",
            SolverKind::EIht => "e_iht",
            SolverKind::EListaScalar => "e_lista_scalar",
            SolverKind::Nnlad => "nnlad",
        }
    }

    /// Whether the solver has learnable per-iteration step sizes and thresholds.
    pub fn is_learnable(self) -> bool {
        matches!(self, SolverKind::ListaScalar | SolverKind::EListaScalar)
    }

    pub fn uses_median(self) -> bool {
        matches!(self, SolverKind::EIht | SolverKind::EListaScalar)
    }

    pub fn uses_sparsity(self) -> bool {
        matches!(self, SolverKind::Iht | SolverKind::EIht)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iht" => SolverKind::Iht,
            "lista_scalar" => SolverKind::ListaScalar,
            "e_iht" => SolverKind::EIht,
            "e_lista_scalar" => SolverKind::EListaScalar,
            "nnlad" => SolverKind::Nnlad,
            other => return Err(Error::Config(format!("unknown solver `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub iterations: usize,
    /// Kept coefficients for the hard-thresholding kinds.
    pub sparsity: usize,
    /// Fixed step for IHT; initial `γ_t` for the learnable kinds.
    pub gamma: f64,
    /// Initial `λ_t` for the learnable kinds.
    pub lambda: f64,
    pub sigma: f64,
    pub tau_nnlad: f64,
    /// Average the training loss over every iterate instead of the last.
    pub average_loss: bool,
}

impl SolverConfig {
    pub fn new(kind: SolverKind, iterations: usize, sparsity: usize) -> Self {
        Self {
            kind,
            iterations,
            sparsity,
            gamma: 1.0,
            lambda: 0.01,
            sigma: 0.1,
            tau_nnlad: 0.6,
            average_loss: kind == SolverKind::Nnlad,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::param("solver", "iterations must be at least 1"));
        }
        if self.kind.uses_sparsity() && (self.sparsity == 0 || self.sparsity > n) {
            return Err(Error::param("solver", format!("sparsity {} outside 1..={n}", self.sparsity)));
        }
        if !(self.gamma.is_finite()) {
            return Err(Error::param("solver", "step size must be finite"));
        }
        if self.kind.is_learnable() && !(self.lambda > 0.0) {
            return Err(Error::param("solver", format!("initial threshold {} must be positive", self.lambda)));
        }
        if self.kind == SolverKind::Nnlad && !(self.sigma > 0.0 && self.tau_nnlad > 0.0) {
            return Err(Error::param("solver", "nnlad needs σ > 0 and τ > 0"));
        }
        Ok(())
    }
}

/// Learnable `(γ_t, ρ_t)` with `λ_t = exp(ρ_t)`; empty for fixed solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    pub gamma: Vec<f64>,
    pub rho: Vec<f64>,
}

impl SolverParams {
    pub fn init(cfg: &SolverConfig) -> Self {
        if cfg.kind.is_learnable() {
            Self { gamma: vec![cfg.gamma; cfg.iterations], rho: vec![cfg.lambda.ln(); cfg.iterations] }
        } else {
            Self { gamma: Vec::new(), rho: Vec::new() }
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len() + self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.exp()).collect()
    }

    /// Places the parameters on `g` as scalar nodes.
    pub fn vars<G: Graph>(&self, g: &mut G) -> ThetaVars<G::Var> {
        ThetaVars {
            gamma: self.gamma.iter().map(|&v| g.constant(Tensor::scalar(v))).collect(),
            rho: self.rho.iter().map(|&v| g.constant(Tensor::scalar(v))).collect(),
        }
    }
}

/// Graph nodes of [`SolverParams`].
pub struct ThetaVars<V> {
    pub gamma: Vec<V>,
    pub rho: Vec<V>,
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { iteration },
        other => other,
    }
}

/// Runs the unrolled solver on a batch of measurements `y` (`B × k`).
///
/// `psi` is used by `iht` and `lista_scalar`; the other kinds require the
/// identity transform.
pub fn run<G: Graph>(
    g: &mut G,
    cfg: &SolverConfig,
    op: &Operator<G>,
    psi: &Transform,
    y: &G::Var,
    theta: &ThetaVars<G::Var>,
) -> Result<Vec<G::Var>> {
    solve(g, cfg, op, psi, y, theta, true)
}

/// Like [`run`] but keeps only the final iterate.
pub fn reconstruct<G: Graph>(
    g: &mut G,
    cfg: &SolverConfig,
    op: &Operator<G>,
    psi: &Transform,
    y: &G::Var,
    theta: &ThetaVars<G::Var>,
) -> Result<G::Var> {
    let mut trace = solve(g, cfg, op, psi, y, theta, false)?;
    Ok(trace.pop().expect("at least one iteration"))
}

fn solve<G: Graph>(
    g: &mut G,
    cfg: &SolverConfig,
    op: &Operator<G>,
    psi: &Transform,
    y: &G::Var,
    theta: &ThetaVars<G::Var>,
    keep: bool,
) -> Result<Vec<G::Var>> {
    let n = op.signal_len();
    cfg.validate(n)?;
    if psi.len() != n && !psi.is_identity() {
        return Err(Error::dim("solver", format!("transform length {} vs signal length {n}", psi.len())));
    }
    if !psi.is_identity() && !matches!(cfg.kind, SolverKind::Iht | SolverKind::ListaScalar) {
        return Err(Error::param("solver", format!("{} works without a sparsifying transform", cfg.kind)));
    }
    if cfg.kind.is_learnable() && (theta.gamma.len() != cfg.iterations || theta.rho.len() != cfg.iterations) {
        return Err(Error::param("solver", format!("{} needs {} (γ, ρ) pairs", cfg.kind, cfg.iterations)));
    }
    let y_val = g.value(y);
    if y_val.cols() != op.measurement_len() {
        return Err(Error::dim("solver", format!("measurement length {} vs {}", y_val.cols(), op.measurement_len())));
    }
    let batch = if y_val.rank() == 1 { vec![n] } else { vec![y_val.rows(), n] };
    let zeros = g.constant(Tensor::zeros(&batch));
    match cfg.kind {
        SolverKind::Nnlad => nnlad(g, cfg, op, y, zeros, keep),
        _ => thresholding(g, cfg, op, psi, y, theta, zeros, keep),
    }
}

fn thresholding<G: Graph>(
    g: &mut G,
    cfg: &SolverConfig,
    op: &Operator<G>,
    psi: &Transform,
    y: &G::Var,
    theta: &ThetaVars<G::Var>,
    zeros: G::Var,
    keep: bool,
) -> Result<Vec<G::Var>> {
    let synth = (!psi.is_identity()).then(|| psi.synthesis_map());
    let synth_adj = (!psi.is_identity()).then(|| psi.synthesis_adjoint_map());
    let mut c = zeros;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let step = |g: &mut G, c: &G::Var| -> Result<(G::Var, G::Var)> {
            let x = match &synth {
                Some(map) => g.linear(map, c)?,
                None => c.clone(),
            };
            let ax = op.apply(g, &x)?;
            let r = g.sub(y, &ax)?;
            let back = if cfg.kind.uses_median() {
                op.median(g, &r)?
            } else {
                let z = op.adjoint(g, &r)?;
                match &synth_adj {
                    Some(map) => g.linear(map, &z)?,
                    None => z,
                }
            };
            let v = match cfg.kind {
                SolverKind::Iht if cfg.gamma == 1.0 => g.add(c, &back)?,
                SolverKind::Iht => {
                    let s = g.scalar_mul(&back, cfg.gamma)?;
                    g.add(c, &s)?
                }
                SolverKind::EIht => g.add(c, &back)?,
                _ => {
                    let s = g.mul_scalar(&theta.gamma[t], &back)?;
                    g.add(c, &s)?
                }
            };
            let next = match cfg.kind {
                SolverKind::Iht | SolverKind::EIht => g.hard_threshold(&v, cfg.sparsity)?,
                _ => {
                    let lambda = g.exp(&theta.rho[t])?;
                    g.soft_threshold_learned(&v, &lambda)?
                }
            };
            let x = match &synth {
                Some(map) => g.linear(map, &next)?,
                None => next.clone(),
            };
            Ok((next, x))
        };
        let (next, x) = step(g, &c).map_err(diverged(t + 1))?;
        if keep || t + 1 == cfg.iterations {
            trace.push(x);
        }
        c = next;
    }
    Ok(trace)
}

fn nnlad<G: Graph>(
    g: &mut G,
    cfg: &SolverConfig,
    op: &Operator<G>,
    y: &G::Var,
    zeros: G::Var,
    keep: bool,
) -> Result<Vec<G::Var>> {
    let mut x = zeros;
    let mut w = g.constant(Tensor::zeros(g.value(y).shape()));
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let step = |g: &mut G, x: &G::Var, w: &G::Var| -> Result<(G::Var, G::Var)> {
            let atw = op.adjoint(g, w)?;
            let atw = g.scalar_mul(&atw, cfg.tau_nnlad)?;
            let moved = g.sub(x, &atw)?;
            let x1 = g.relu_nonneg(&moved)?;
            let twice = g.scalar_mul(&x1, 2.0)?;
            let xbar = g.sub(&twice, x)?;
            let ax = op.apply(g, &xbar)?;
            let r = g.sub(&ax, y)?;
            let r = g.scalar_mul(&r, cfg.sigma)?;
            let w_up = g.add(w, &r)?;
            Ok((x1, g.clamp(&w_up, -1.0, 1.0)?))
        };
        let (x1, w1) = step(g, &x, &w).map_err(diverged(t + 1))?;
        if keep || t + 1 == cfg.iterations {
            trace.push(x1.clone());
        }
        x = x1;
        w = w1;
    }
    Ok(trace)
}

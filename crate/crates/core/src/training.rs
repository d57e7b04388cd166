//! End-to-end mask learning: sample a mask, measure, reconstruct with the
//! unrolled solver, and update both the mask logits and the solver
//! parameters with Adam.
//!
//! Randomness is split into named streams (see [`crate::rng::streams`]) so
//! that data, Gumbel noise, and measurement noise are reproducible
//! independently and a run can be resumed bit-exactly from a [`TrainState`].

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};

use crate::data::{gen_sparse, take_rows, SyntheticSpec};
use crate::diffgraph::{Eager, Graph, Tape, Tensor};
use crate::gumbel::{freeze_mask, sample_mask, BinaryMask, MaskLogits};
use crate::operators::{default_scale_grid, grid_search_scale, MaskSpace};
use crate::rng::{seeded, streams, StreamRng, StreamState};
use crate::solvers::{self, SolverConfig, SolverKind, SolverParams};
use crate::transforms::Transform;
use crate::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam_step", format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient {} at parameter {i} (step {})", grads[i], self.t + 1)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
    /// Student-t with one degree of freedom (standard Cauchy).
    StudentT1,
}

impl FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "student_t_df1" | "student_t1" => Ok(NoiseFamily::StudentT1),
            other => Err(Error::Config(format!("unknown noise family `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::StudentT1 => "student_t_df1",
        })
    }
}

/// Additive noise at a per-sample signal-to-noise ratio.
///
/// The Cauchy family has no variance; its standard draws are scaled by the
/// factor that would give the requested SNR for unit-variance noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub snr_db: f64,
}

impl NoiseModel {
    pub fn new(family: NoiseFamily, snr_db: f64) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::param("noise", format!("invalid SNR {snr_db} dB")));
        }
        Ok(Self { family, snr_db })
    }

    pub fn noiseless() -> Self {
        Self { family: NoiseFamily::Gaussian, snr_db: f64::INFINITY }
    }

    /// Noise for every row of `y`. `support` marks the observed entries;
    /// power is measured and noise added only there.
    pub fn sample<R: Rng + ?Sized>(&self, y: &Tensor, support: Option<&[f64]>, rng: &mut R) -> Tensor {
        let mut noise = Tensor::zeros(y.shape());
        let cols = y.cols();
        let active = |j: usize| support.is_none_or(|s| s[j] != 0.0);
        let count = (0..cols).filter(|&j| active(j)).count().max(1);
        let ratio = 10f64.powf(-self.snr_db / 10.0);
        for r in 0..y.rows() {
            let power = y.row(r).iter().enumerate().filter(|(j, _)| active(*j)).map(|(_, v)| v * v).sum::<f64>() / count as f64;
            let sigma = (power * ratio).sqrt();
            for (j, n) in noise.row_mut(r).iter_mut().enumerate() {
                if !active(j) {
                    continue;
                }
                let z: f64 = match self.family {
                    NoiseFamily::Gaussian => StandardNormal.sample(rng),
                    NoiseFamily::StudentT1 => Cauchy::new(0.0, 1.0).expect("unit Cauchy").sample(rng),
                };
                *n = sigma * z;
            }
        }
        noise
    }
}

/// `y + noise`.
pub fn add_noise<R: Rng + ?Sized>(y: &Tensor, model: &NoiseModel, rng: &mut R) -> Tensor {
    let mut out = model.sample(y, None, rng);
    out.add_assign(y);
    out
}

/// Reporting floor for exact reconstructions.
pub const DB_FLOOR: f64 = -150.0;

fn ratio_db(op: &'static str, num: f64, den: f64) -> Result<f64> {
    if !(den > 0.0) {
        return Err(Error::Metric(format!("{op}: reference batch has zero energy")));
    }
    let r = num / den;
    Ok(if r > 0.0 { (10.0 * r.log10()).max(DB_FLOOR) } else { DB_FLOOR })
}

/// `10 log₁₀(E‖x̂ − x‖² / E‖x‖²)` over the whole batch.
pub fn nmse_db(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim("nmse", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let num: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    ratio_db("nmse", num, x.data().iter().map(|v| v * v).sum())
}

/// `10 log₁₀(E‖x̂ − x‖₁ / E‖x‖₁)` over the whole batch.
pub fn nmae_db(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim("nmae", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let num: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    ratio_db("nmae", num, x.data().iter().map(|v| v.abs()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SquaredL2,
    L1,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_l2" | "l2" => Ok(LossKind::SquaredL2),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// How the per-sample loss is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// `‖x̂ − x‖` per sample, averaged over the batch.
    Sample,
    /// Additionally divided by the signal length.
    Element,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Reduction::Sample),
            "element" => Ok(Reduction::Element),
            other => Err(Error::Config(format!("unknown loss reduction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub average_over_iterations: bool,
    pub reduction: Reduction,
}

impl LossSpec {
    /// Scalar loss of a solver trace against the true batch `x`.
    pub fn on_trace<G: Graph>(&self, g: &mut G, trace: &[G::Var], x: &G::Var) -> Result<G::Var> {
        let xv = g.value(x);
        let denom = match self.reduction {
            Reduction::Sample => xv.rows() as f64,
            Reduction::Element => xv.len() as f64,
        };
        let used: &[G::Var] = if self.average_over_iterations { trace } else { &trace[trace.len() - 1..] };
        let mut total: Option<G::Var> = None;
        for xh in used {
            let d = g.sub(xh, x)?;
            let l = match self.kind {
                LossKind::SquaredL2 => g.sq_sum(&d)?,
                LossKind::L1 => g.abs_sum(&d)?,
            };
            total = Some(match total {
                Some(t) => g.add(&t, &l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Training("empty solver trace".into()))?;
        g.scalar_mul(&total, 1.0 / (denom * used.len() as f64))
    }
}

/// Where training and test signals come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh samples every epoch; a fixed test set drawn once.
    Synthetic { spec: SyntheticSpec, samples_per_epoch: usize, test_samples: usize },
    /// A fixed training set visited once per epoch in shuffled order.
    Images { train: Rc<Tensor>, test: Rc<Tensor> },
}

impl DataSource {
    pub fn signal_len(&self) -> usize {
        match self {
            DataSource::Synthetic { spec, .. } => spec.n,
            DataSource::Images { train, .. } => train.cols(),
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DataSource::Images { .. })
    }

    pub fn test_set(&self, seed: u64) -> Tensor {
        match self {
            DataSource::Synthetic { spec, test_samples, .. } => {
                gen_sparse(spec, *test_samples, &mut seeded(seed, streams::TEST_DATA))
            }
            DataSource::Images { test, .. } => (**test).clone(),
        }
    }

    fn epoch_len(&self) -> usize {
        match self {
            DataSource::Synthetic { samples_per_epoch, .. } => *samples_per_epoch,
            DataSource::Images { train, .. } => train.rows(),
        }
    }

    /// The mini-batches of one epoch.
    fn epoch_batches(&self, batch: usize, rng: &mut StreamRng) -> Vec<Tensor> {
        match self {
            DataSource::Synthetic { spec, samples_per_epoch, .. } => (0..samples_per_epoch.div_ceil(batch))
                .map(|k| gen_sparse(spec, batch.min(samples_per_epoch - k * batch), rng))
                .collect(),
            DataSource::Images { train, .. } => {
                let mut order: Vec<usize> = (0..train.rows()).collect();
                order.shuffle(rng);
                order.chunks(batch).map(|idx| take_rows(train, idx)).collect()
            }
        }
    }

    /// One batch of `count` signals, as used by the discrete baselines.
    pub fn sample_batch(&self, count: usize, rng: &mut StreamRng) -> Tensor {
        match self {
            DataSource::Synthetic { spec, .. } => gen_sparse(spec, count, rng),
            DataSource::Images { train, .. } => {
                let idx = rand::seq::index::sample(rng, train.rows(), count.min(train.rows())).into_vec();
                take_rows(train, &idx)
            }
        }
    }
}

/// Everything that defines the measurement-and-reconstruction pipeline.
#[derive(Clone, Debug)]
pub struct Problem {
    pub space: MaskSpace,
    pub transform: Transform,
    pub solver: SolverConfig,
    pub noise: NoiseModel,
    pub loss: LossSpec,
    /// Positivity threshold for the false positive/negative counts.
    pub detection_threshold: f64,
}

/// Test-set metrics of one frozen mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub nmse_db: f64,
    pub nmae_db: f64,
    pub loss: f64,
    /// Mean false positives per sample at the detection threshold.
    pub false_positives: f64,
    pub false_negatives: f64,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    fn measure_and_solve<G: Graph>(
        &self,
        g: &mut G,
        mask: &G::Var,
        hard: &BinaryMask,
        scale: f64,
        theta: &SolverParams,
        x: &G::Var,
        noise_rng: &mut StreamRng,
        keep_trace: bool,
    ) -> Result<Vec<G::Var>> {
        let op = self.space.operator(g, mask, hard, scale)?;
        let theta = theta.vars(g);
        let y = op.apply(g, x)?;
        let noise = self.noise.sample(g.value(&y), op.support(), noise_rng);
        let noise = g.constant(noise);
        let y = g.add(&y, &noise)?;
        if keep_trace {
            solvers::run(g, &self.solver, &op, &self.transform, &y, &theta)
        } else {
            Ok(vec![solvers::reconstruct(g, &self.solver, &op, &self.transform, &y, &theta)?])
        }
    }

    /// Reconstructions of `x` through a fixed mask, without gradients.
    pub fn reconstruct(
        &self,
        mask: &BinaryMask,
        scale: f64,
        theta: &SolverParams,
        x: &Tensor,
        noise_rng: &mut StreamRng,
    ) -> Result<Tensor> {
        let mut g = Eager;
        let mv = g.constant(mask.to_tensor());
        let xv = g.constant(x.clone());
        let out = self.measure_and_solve(&mut g, &mv, mask, scale, theta, &xv, noise_rng, false)?;
        Ok(Rc::unwrap_or_clone(out.into_iter().next().expect("final iterate")))
    }

    /// Training loss of a fixed mask on one batch (no gradients).
    pub fn batch_loss(
        &self,
        mask: &BinaryMask,
        scale: f64,
        theta: &SolverParams,
        x: &Tensor,
        noise_rng: &mut StreamRng,
    ) -> Result<f64> {
        let mut g = Eager;
        let mv = g.constant(mask.to_tensor());
        let xv = g.constant(x.clone());
        let trace =
            self.measure_and_solve(&mut g, &mv, mask, scale, theta, &xv, noise_rng, self.loss.average_over_iterations)?;
        Ok(self.loss.on_trace(&mut g, &trace, &xv)?.item())
    }

    /// Metrics of a frozen mask on `test`; the reported loss uses the final
    /// iterate only. Measurement noise comes from a fresh `EVAL_NOISE` stream, so repeated
    /// evaluations see identical noise.
    pub fn evaluate(&self, mask: &BinaryMask, scale: f64, theta: &SolverParams, test: &Tensor, seed: u64) -> Result<Metrics> {
        const CHUNK: usize = 500;
        let spec = LossSpec { average_over_iterations: false, ..self.loss };
        let mut rng = seeded(seed, streams::EVAL_NOISE);
        let mut x_hat = Tensor::zeros(test.shape());
        let mut loss = 0.0;
        let rows: Vec<usize> = (0..test.rows()).collect();
        for idx in rows.chunks(CHUNK) {
            let x = take_rows(test, idx);
            let mut g = Eager;
            let mv = g.constant(mask.to_tensor());
            let xv = g.constant(x.clone());
            let trace = self.measure_and_solve(&mut g, &mv, mask, scale, theta, &xv, &mut rng, false)?;
            loss += spec.on_trace(&mut g, &trace, &xv)?.item() * idx.len() as f64;
            for (k, &r) in idx.iter().enumerate() {
                x_hat.row_mut(r).copy_from_slice(trace.last().expect("final iterate").row(k));
            }
        }
        let t = self.detection_threshold;
        let (mut fp, mut fneg) = (0usize, 0usize);
        for (a, b) in test.data().iter().zip(x_hat.data()) {
            match (*a != 0.0, *b > t) {
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let count = test.rows().max(1) as f64;
        Ok(Metrics {
            nmse_db: nmse_db(test, &x_hat)?,
            nmae_db: nmae_db(test, &x_hat)?,
            loss: loss / count,
            false_positives: fp as f64 / count,
            false_negatives: fneg as f64 / count,
        })
    }

    /// Grid search for the operator scale using the untrained solver on a
    /// probe batch, with `fixed` or else the mask drawn from the initial logits.
    pub fn search_scale(
        &self,
        data: &DataSource,
        logits: &MaskLogits,
        fixed: Option<&BinaryMask>,
        theta: &SolverParams,
        seed: u64,
        grid: &[f64],
    ) -> Result<f64> {
        let mut rng = seeded(seed, streams::PROBE);
        let probe = data.sample_batch(256, &mut rng);
        let drawn = freeze_mask(logits, self.space.partition(), &mut rng)?;
        let mask = fixed.unwrap_or(&drawn);
        let noise_state = StreamState::capture(&rng);
        grid_search_scale(grid, data.is_image(), |scale| {
            let mut noise = noise_state.restore();
            self.batch_loss(mask, scale, theta, &probe, &mut noise)
        })
    }
}

/// A uniformly random mask from the space (zero logits, unit Gumbel noise).
pub fn random_mask<R: Rng + ?Sized>(space: &MaskSpace, rng: &mut R) -> Result<BinaryMask> {
    let p = space.partition();
    let logits = MaskLogits::new(Tensor::zeros(&[p.grid_rows(), p.grid_cols()]), 1.0, 1.0)?;
    freeze_mask(&logits, p, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScaleChoice {
    Fixed(f64),
    /// Grid search over the given candidates (default grid when empty).
    Search(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_mask: f64,
    pub lr_theta: f64,
    pub learn_mask: bool,
    pub learn_theta: bool,
    /// Multiplier on the Gumbel(0, 1) initialization of `φ`.
    pub init_scale: f64,
    pub noise_scale: f64,
    pub tau: f64,
    pub scale: ScaleChoice,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [("lr_mask", self.lr_mask), ("lr_theta", self.lr_theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.tau > 0.0) || !(self.noise_scale >= 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("tau must be positive; noise_scale and init_scale non-negative".into()));
        }
        if let ScaleChoice::Fixed(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("scale {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// Complete resumable state of a run, taken at epoch boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub logits: MaskLogits,
    pub params: SolverParams,
    pub scale: f64,
    pub adam_mask: AdamState,
    pub adam_theta: AdamState,
    pub data_rng: StreamState,
    pub gumbel_rng: StreamState,
    pub noise_rng: StreamState,
    /// Fixed mask used instead of sampling when the mask is not learned.
    pub fixed_mask: Option<BinaryMask>,
    pub loss_evaluations: u64,
}

impl TrainState {
    /// Initial state: Gumbel-initialized logits, scale from `cfg.scale`.
    pub fn init(problem: &Problem, data: &DataSource, cfg: &TrainConfig, fixed_mask: Option<BinaryMask>) -> Result<Self> {
        cfg.validate()?;
        problem.solver.validate(problem.space.n())?;
        if data.signal_len() != problem.space.n() {
            return Err(Error::Config(format!("data length {} vs signal length {}", data.signal_len(), problem.space.n())));
        }
        if let Some(mask) = &fixed_mask {
            if !mask.satisfies(problem.space.partition()) {
                return Err(Error::Structure("fixed mask violates the partition counts".into()));
            }
        }
        let mut init_rng = seeded(cfg.seed, streams::INIT);
        let logits = MaskLogits::init(problem.space.partition(), cfg.init_scale, cfg.noise_scale, cfg.tau, &mut init_rng)?;
        let params = SolverParams::init(&problem.solver);
        let scale = match &cfg.scale {
            ScaleChoice::Fixed(s) => *s,
            ScaleChoice::Search(grid) => {
                let grid = if grid.is_empty() { default_scale_grid() } else { grid.clone() };
                problem.search_scale(data, &logits, fixed_mask.as_ref(), &params, cfg.seed, &grid)?
            }
        };
        Ok(Self {
            epoch: 0,
            adam_mask: AdamState::new(logits.phi.len(), cfg.lr_mask),
            adam_theta: AdamState::new(params.len(), cfg.lr_theta),
            logits,
            params,
            scale,
            data_rng: StreamState::capture(&seeded(cfg.seed, streams::TRAIN_DATA)),
            gumbel_rng: StreamState::capture(&seeded(cfg.seed, streams::GUMBEL)),
            noise_rng: StreamState::capture(&seeded(cfg.seed, streams::MEASUREMENT_NOISE)),
            fixed_mask,
            loss_evaluations: 0,
        })
    }

    /// The mask used at test time: fixed, or frozen from the current logits.
    pub fn test_mask(&self, problem: &Problem, seed: u64) -> Result<BinaryMask> {
        match &self.fixed_mask {
            Some(m) => Ok(m.clone()),
            None => freeze_mask(&self.logits, problem.space.partition(), &mut seeded(seed, streams::EVAL_MASK)),
        }
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub mask: BinaryMask,
    pub history: Vec<MetricRecord>,
    /// Set when a step diverged; `state` is then the last completed epoch.
    pub aborted: Option<String>,
}

pub(crate) fn push_metrics(history: &mut Vec<MetricRecord>, epoch: usize, m: &Metrics, train_loss: Option<f64>) {
    let mut push = |split, metric, value| history.push(MetricRecord { epoch, split, metric, value });
    push("test", "nmse_db", m.nmse_db);
    push("test", "nmae_db", m.nmae_db);
    push("test", "loss", m.loss);
    push("test", "false_positives", m.false_positives);
    push("test", "false_negatives", m.false_negatives);
    if let Some(l) = train_loss {
        push("train", "loss", l);
    }
}

/// One optimization step on `x`. Returns the batch loss.
fn train_step(problem: &Problem, cfg: &TrainConfig, st: &mut TrainState, x: &Tensor, gumbel: &mut StreamRng, noise: &mut StreamRng) -> Result<f64> {
    let mut tape = Tape::new();
    let phi = tape.leaf(st.logits.phi.clone());
    let (mask_var, hard) = match &st.fixed_mask {
        Some(m) => (tape.constant(m.to_tensor()), m.clone()),
        None => {
            let s = sample_mask(&mut tape, &phi, &st.logits, problem.space.partition(), gumbel, false)?;
            (s.var, s.hard)
        }
    };
    let op = problem.space.operator(&mut tape, &mask_var, &hard, st.scale)?;
    let theta = st.params.vars(&mut tape);
    let xv = tape.constant(x.clone());
    let y = op.apply(&mut tape, &xv)?;
    let n = problem.noise.sample(tape.value(&y), op.support(), noise);
    let n = tape.constant(n);
    let y = tape.add(&y, &n)?;
    let trace = solvers::run(&mut tape, &problem.solver, &op, &problem.transform, &y, &theta)?;
    let loss = problem.loss.on_trace(&mut tape, &trace, &xv)?;
    let value = tape.value(&loss).item();
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite training loss at step {}", st.adam_mask.t + 1)));
    }
    let grads = tape.backward(loss)?;
    if cfg.learn_mask && st.fixed_mask.is_none() {
        let g = grads.get(phi);
        st.adam_mask.step(st.logits.phi.data_mut(), g.data())?;
    }
    if cfg.learn_theta && !st.params.is_empty() {
        let mut g: Vec<f64> = theta.gamma.iter().map(|&v| grads.get(v).item()).collect();
        g.extend(theta.rho.iter().map(|&v| grads.get(v).item()));
        let mut p: Vec<f64> = st.params.gamma.iter().chain(&st.params.rho).copied().collect();
        st.adam_theta.step(&mut p, &g)?;
        let t = st.params.gamma.len();
        st.params.gamma.copy_from_slice(&p[..t]);
        st.params.rho.copy_from_slice(&p[t..]);
    }
    Ok(value)
}

/// Runs `cfg.epochs − state.epoch` further epochs from `state`.
///
/// Before the first epoch and after every epoch the frozen test mask is
/// evaluated on the held-out set. A diverging step stops the run and keeps
/// the state of the last completed epoch.
pub fn train(problem: &Problem, data: &DataSource, cfg: &TrainConfig, state: TrainState) -> Result<TrainOutcome> {
    let test = data.test_set(cfg.seed);
    let mut history = Vec::new();
    let mut state = state;
    if state.epoch == 0 {
        let mask = state.test_mask(problem, cfg.seed)?;
        let m = problem.evaluate(&mask, state.scale, &state.params, &test, cfg.seed)?;
        push_metrics(&mut history, 0, &m, None);
    }
    let mut aborted = None;
    while state.epoch < cfg.epochs {
        let mut next = state.clone();
        let mut data_rng = next.data_rng.restore();
        let mut gumbel = next.gumbel_rng.restore();
        let mut noise = next.noise_rng.restore();
        let batches = data.epoch_batches(cfg.batch_size, &mut data_rng);
        let mut total = 0.0;
        let mut failure = None;
        for x in &batches {
            match train_step(problem, cfg, &mut next, x, &mut gumbel, &mut noise) {
                Ok(l) => total += l * x.rows() as f64,
                Err(e @ (Error::Divergence { .. } | Error::NonFinite { .. } | Error::Training(_))) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            next.loss_evaluations += 1;
        }
        if let Some(f) = failure {
            aborted = Some(format!("epoch {}: {f}", state.epoch + 1));
            break;
        }
        next.epoch += 1;
        next.data_rng = StreamState::capture(&data_rng);
        next.gumbel_rng = StreamState::capture(&gumbel);
        next.noise_rng = StreamState::capture(&noise);
        state = next;
        let mask = state.test_mask(problem, cfg.seed)?;
        let m = problem.evaluate(&mask, state.scale, &state.params, &test, cfg.seed)?;
        push_metrics(&mut history, state.epoch, &m, Some(total / data.epoch_len().max(1) as f64));
    }
    let mask = state.test_mask(problem, cfg.seed)?;
    Ok(TrainOutcome { state, mask, history, aborted })
}

/// Loss matching each solver family's experiments.
pub fn default_loss(kind: SolverKind) -> LossSpec {
    match kind {
        SolverKind::EIht | SolverKind::EListaScalar => {
            LossSpec { kind: LossKind::L1, average_over_iterations: false, reduction: Reduction::Sample }
        }
        SolverKind::Nnlad => LossSpec { kind: LossKind::L1, average_over_iterations: true, reduction: Reduction::Sample },
        _ => LossSpec { kind: LossKind::SquaredL2, average_over_iterations: false, reduction: Reduction::Sample },
    }
}

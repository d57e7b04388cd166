//! Discrete local search over the same structured mask space: greedy
//! descent and simulated annealing with neighbor swaps inside one subset.

use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::gumbel::{BinaryMask, Partition};
use crate::rng::{seeded, streams, StreamState};
use crate::solvers::SolverParams;
use crate::training::{push_metrics, random_mask, DataSource, MetricRecord, Problem};
use crate::{Error, Result};

/// Swaps one 1 and one 0 inside a random subset that contains both.
pub fn propose_neighbor<R: Rng + ?Sized>(mask: &BinaryMask, partition: &Partition, rng: &mut R) -> Result<BinaryMask> {
    let bits = mask.bits();
    let eligible: Vec<&Vec<usize>> = partition
        .subsets()
        .iter()
        .filter(|s| {
            let ones = s.iter().filter(|&&i| bits[i] == 1).count();
            ones > 0 && ones < s.len()
        })
        .collect();
    let subset = eligible
        .choose(rng)
        .ok_or_else(|| Error::Structure("every subset is all ones or all zeros; no neighbor exists".into()))?;
    let (ones, zeros): (Vec<usize>, Vec<usize>) = subset.iter().partition(|&&i| bits[i] == 1);
    let on = *ones.choose(rng).expect("subset has a one");
    let off = *zeros.choose(rng).expect("subset has a zero");
    let mut next = mask.clone();
    next.flip(on);
    next.flip(off);
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcceptanceRule {
    /// Accept a loss increase `Δ` with probability `exp(−Δ/τ)`.
    Metropolis,
    /// Accept a non-decrease when `exp(−Δ/τ) < u`, as the rule is sometimes
    /// written; large increases become more likely to pass.
    Literal,
}

impl FromStr for AcceptanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metropolis" => Ok(AcceptanceRule::Metropolis),
            "literal" => Ok(AcceptanceRule::Literal),
            other => Err(Error::Config(format!("unknown acceptance rule `{other}`"))),
        }
    }
}

/// Geometric cooling `τ_k = τ₀ · decay^k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub decay: f64,
}

impl AnnealSchedule {
    pub fn new(tau0: f64, decay: f64) -> Result<Self> {
        if !(tau0 > 0.0) || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::param("anneal", format!("need τ₀ > 0 and 0 < decay ≤ 1, got {tau0}, {decay}")));
        }
        Ok(Self { tau0, decay })
    }

    /// Settings used for single-pixel masks.
    pub fn single_pixel() -> Self {
        Self { tau0: 0.0012, decay: 0.9997 }
    }

    /// Settings used for left-d-regular graphs.
    pub fn expander() -> Self {
        Self { tau0: 0.003, decay: 0.9998 }
    }
}

/// Outcome of evaluating one neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub mask: BinaryMask,
    pub accepted: bool,
    pub current_loss: f64,
    pub candidate_loss: f64,
}

fn evaluate_pair<R: Rng + ?Sized>(
    mask: &BinaryMask,
    partition: &Partition,
    rng: &mut R,
    loss: &mut impl FnMut(&BinaryMask) -> Result<f64>,
) -> Result<(BinaryMask, f64, f64)> {
    let candidate = propose_neighbor(mask, partition, rng)?;
    let current = loss(mask)?;
    let cand = loss(&candidate)?;
    Ok((candidate, current, cand))
}

/// Accepts the neighbor only if it strictly lowers the loss.
pub fn greedy_step<R: Rng + ?Sized>(
    mask: &BinaryMask,
    partition: &Partition,
    rng: &mut R,
    mut loss: impl FnMut(&BinaryMask) -> Result<f64>,
) -> Result<Step> {
    let (candidate, current, cand) = evaluate_pair(mask, partition, rng, &mut loss)?;
    let accepted = cand < current;
    Ok(Step { mask: if accepted { candidate } else { mask.clone() }, accepted, current_loss: current, candidate_loss: cand })
}

/// One annealing step at temperature `*tau`, which is then decayed.
pub fn siman_step<R: Rng + ?Sized>(
    mask: &BinaryMask,
    partition: &Partition,
    tau: &mut f64,
    schedule: &AnnealSchedule,
    rule: AcceptanceRule,
    rng: &mut R,
    mut loss: impl FnMut(&BinaryMask) -> Result<f64>,
) -> Result<Step> {
    if !(*tau > 0.0) {
        return Err(Error::param("siman_step", format!("temperature {tau} must be positive")));
    }
    let (candidate, current, cand) = evaluate_pair(mask, partition, rng, &mut loss)?;
    let accepted = if cand < current {
        true
    } else {
        let p = (-(cand - current) / *tau).exp();
        let u: f64 = rng.random();
        match rule {
            AcceptanceRule::Metropolis => u < p,
            AcceptanceRule::Literal => p < u,
        }
    };
    *tau *= schedule.decay;
    Ok(Step { mask: if accepted { candidate } else { mask.clone() }, accepted, current_loss: current, candidate_loss: cand })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Greedy,
    Anneal(AnnealSchedule, AcceptanceRule),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub method: Method,
    pub epochs: usize,
    /// Neighbor evaluations per epoch; each uses one fresh mini-batch.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub mask: BinaryMask,
    pub history: Vec<MetricRecord>,
    /// Fraction of accepted neighbors in each epoch.
    pub acceptance: Vec<f64>,
    /// Mini-batches drawn (one per step).
    pub steps: u64,
}

/// Runs greedy search or annealing from a uniformly random mask.
///
/// Each step draws a fresh mini-batch and fresh measurement noise and
/// evaluates the current mask and its neighbor on that same batch and noise.
pub fn run_baseline(
    problem: &Problem,
    data: &DataSource,
    cfg: &BaselineConfig,
    scale: f64,
    params: &SolverParams,
) -> Result<BaselineOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let partition = problem.space.partition();
    let mut rng = seeded(cfg.seed, streams::BASELINE);
    let mut data_rng = seeded(cfg.seed, streams::TRAIN_DATA);
    let mut noise_rng = seeded(cfg.seed, streams::MEASUREMENT_NOISE);
    let mut mask = random_mask(&problem.space, &mut seeded(cfg.seed, streams::INIT))?;
    let test = data.test_set(cfg.seed);
    let mut history = Vec::new();
    let m = problem.evaluate(&mask, scale, params, &test, cfg.seed)?;
    push_metrics(&mut history, 0, &m, None);
    let mut tau = match cfg.method {
        Method::Anneal(s, _) => s.tau0,
        Method::Greedy => 0.0,
    };
    let mut acceptance = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut accepted = 0usize;
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let x = data.sample_batch(cfg.batch_size, &mut data_rng);
            let noise_state = StreamState::capture(&noise_rng);
            let mut after = None;
            let loss = |mk: &BinaryMask| {
                let mut r = noise_state.restore();
                let l = problem.batch_loss(mk, scale, params, &x, &mut r);
                after = Some(r);
                l
            };
            let step = match cfg.method {
                Method::Greedy => greedy_step(&mask, partition, &mut rng, loss)?,
                Method::Anneal(schedule, rule) => siman_step(&mask, partition, &mut tau, &schedule, rule, &mut rng, loss)?,
            };
            noise_rng = after.expect("loss evaluated");
            accepted += step.accepted as usize;
            total += if step.accepted { step.candidate_loss } else { step.current_loss };
            mask = step.mask;
            steps += 1;
        }
        acceptance.push(accepted as f64 / cfg.steps_per_epoch.max(1) as f64);
        let m = problem.evaluate(&mask, scale, params, &test, cfg.seed)?;
        push_metrics(&mut history, epoch, &m, Some(total / cfg.steps_per_epoch.max(1) as f64));
        history.push(MetricRecord { epoch, split: "train", metric: "acceptance", value: acceptance[epoch - 1] });
    }
    Ok(BaselineOutcome { mask, history, acceptance, steps })
}

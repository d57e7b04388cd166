//! Structured binary masks sampled from learnable logits with the
//! straight-through Gumbel top-K reparametrization.
//!
//! For every subset `I_i` of a [`Partition`] the sampler adds scaled
//! Gumbel(0, 1) noise to `φ[I_i]`, divides by the temperature, and keeps the
//! `d_i` largest entries. The forward value is the hard 0/1 indicator; the
//! backward pass uses the softmax of the same noisy logits.

use std::sync::Arc;

use rand::Rng;

use crate::diffgraph::{kernels, Graph, Tensor};
use crate::{Error, Result};

const UNIFORM_EPS: f64 = 1e-12;

/// Disjoint cover of an `rows × cols` index grid with per-subset keep counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    rows: usize,
    cols: usize,
    subsets: Vec<Vec<usize>>,
    keep: Vec<usize>,
}

impl Partition {
    /// Builds a partition from flat (row-major) index subsets.
    pub fn new(rows: usize, cols: usize, mut subsets: Vec<Vec<usize>>, keep: Vec<usize>) -> Result<Self> {
        if subsets.len() != keep.len() {
            return Err(Error::Structure(format!("{} subsets but {} keep counts", subsets.len(), keep.len())));
        }
        let total = rows * cols;
        let mut seen = vec![false; total];
        for (i, (s, &d)) in subsets.iter_mut().zip(&keep).enumerate() {
            if s.is_empty() {
                return Err(Error::Structure(format!("subset {i} is empty")));
            }
            s.sort_unstable();
            for &idx in s.iter() {
                if idx >= total {
                    return Err(Error::Structure(format!("subset {i} index {idx} outside {rows}x{cols} grid")));
                }
                if std::mem::replace(&mut seen[idx], true) {
                    return Err(Error::Structure(format!("index {idx} appears in more than one subset")));
                }
            }
            if d == 0 || d > s.len() {
                return Err(Error::Structure(format!("subset {i}: keep count {d} outside 1..={}", s.len())));
            }
        }
        if let Some(missing) = seen.iter().position(|&v| !v) {
            return Err(Error::Structure(format!("index {missing} is not covered by any subset")));
        }
        Ok(Self { rows, cols, subsets, keep })
    }

    /// One subset per row, `d` ones per row.
    pub fn rows(rows: usize, cols: usize, d: usize) -> Result<Self> {
        let subsets = (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect();
        Self::new(rows, cols, subsets, vec![d; rows])
    }

    /// One subset per column, `d` ones per column (left-d-regular graphs).
    pub fn columns(rows: usize, cols: usize, d: usize) -> Result<Self> {
        let subsets = (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect();
        Self::new(rows, cols, subsets, vec![d; cols])
    }

    /// One subset per row with a distinct keep count for each row.
    pub fn rows_with_counts(rows: usize, cols: usize, keep: Vec<usize>) -> Result<Self> {
        let subsets = (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect();
        Self::new(rows, cols, subsets, keep)
    }

    pub fn grid_rows(&self) -> usize {
        self.rows
    }

    pub fn grid_cols(&self) -> usize {
        self.cols
    }

    pub fn grid_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn keep_counts(&self) -> &[usize] {
        &self.keep
    }
}

/// Binary matrix with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim("binary_mask", format!("{} bits for {rows}x{cols}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Structure("mask entries must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let bits = t
            .data()
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::Structure(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(t.rows(), t.cols(), bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| f64::from(b)).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("mask dimensions are consistent")
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| usize::from(b)).sum()
    }

    pub(crate) fn flip(&mut self, idx: usize) {
        self.bits[idx] ^= 1;
    }

    /// Checks the exact per-subset ones counts of `partition`.
    pub fn satisfies(&self, partition: &Partition) -> bool {
        self.rows == partition.rows
            && self.cols == partition.cols
            && partition
                .subsets
                .iter()
                .zip(&partition.keep)
                .all(|(s, &d)| s.iter().filter(|&&i| self.bits[i] == 1).count() == d)
    }
}

/// Learnable logits `φ` plus the sampling hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub phi: Tensor,
    pub noise_scale: f64,
    pub tau: f64,
}

impl MaskLogits {
    pub fn new(phi: Tensor, noise_scale: f64, tau: f64) -> Result<Self> {
        if !(noise_scale >= 0.0) {
            return Err(Error::param("mask_logits", format!("noise scale {noise_scale} must be >= 0")));
        }
        if !(tau > 0.0) {
            return Err(Error::param("mask_logits", format!("temperature {tau} must be positive")));
        }
        Ok(Self { phi, noise_scale, tau })
    }

    /// `φ` drawn i.i.d. from Gumbel(0, 1) and multiplied by `init_scale`.
    pub fn init<R: Rng + ?Sized>(
        partition: &Partition,
        init_scale: f64,
        noise_scale: f64,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut phi = gumbel_noise(&[partition.rows, partition.cols], rng);
        phi.data_mut().iter_mut().for_each(|v| *v *= init_scale);
        Self::new(phi, noise_scale, tau)
    }

    fn check(&self, partition: &Partition) -> Result<()> {
        if self.phi.len() != partition.grid_len() || self.phi.cols() != partition.cols {
            return Err(Error::dim(
                "sample_mask",
                format!("logits {:?} vs partition grid {}x{}", self.phi.shape(), partition.rows, partition.cols),
            ));
        }
        Ok(())
    }
}

/// Inverse-CDF Gumbel(0, 1) sample: `−ln(−ln u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// I.i.d. Gumbel(0, 1) samples of the given shape.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = gumbel_from_uniform(rng.random::<f64>());
    }
    t
}

/// Straight-through top-`d` of a single logit vector.
pub fn straight_through_topk<G: Graph>(g: &mut G, logits: &G::Var, d: usize, tau: f64) -> Result<G::Var> {
    let n = g.value(logits).len();
    if d == 0 || d > n {
        return Err(Error::param("straight_through_topk", format!("d={d} outside 1..={n}")));
    }
    let partition = Arc::new(Partition::rows(1, n, d)?);
    g.topk_straight_through(logits, &partition, tau, false)
}

/// Sampled mask as a graph node together with its hard realization.
pub struct SampledMask<V> {
    pub var: V,
    pub hard: BinaryMask,
}

/// Draws fresh Gumbel noise and records the straight-through top-K mask.
///
/// `phi` is the graph node holding the logits; `relaxed` replaces the hard
/// forward value with the softmax surrogate (used for gradient checks).
pub fn sample_mask<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    phi: &G::Var,
    logits: &MaskLogits,
    partition: &Arc<Partition>,
    rng: &mut R,
    relaxed: bool,
) -> Result<SampledMask<G::Var>> {
    logits.check(partition)?;
    let mut noise = gumbel_noise(logits.phi.shape(), rng);
    noise.data_mut().iter_mut().for_each(|v| *v *= logits.noise_scale);
    let noise = g.constant(noise);
    let noisy = g.add(phi, &noise)?;
    let hard = {
        let (h, _) = crate::diffgraph::ops_topk(partition, g.value(&noisy), logits.tau)?;
        BinaryMask::from_tensor(&h)?
    };
    let var = g.topk_straight_through(&noisy, partition, logits.tau, relaxed)?;
    Ok(SampledMask { var, hard })
}

/// Test-time mask: the same draw as [`sample_mask`], detached from any tape.
pub fn freeze_mask<R: Rng + ?Sized>(logits: &MaskLogits, partition: &Partition, rng: &mut R) -> Result<BinaryMask> {
    logits.check(partition)?;
    let noise = gumbel_noise(logits.phi.shape(), rng);
    let noisy = kernels::zip(&logits.phi, &noise, |p, n| p + logits.noise_scale * n);
    let (hard, _) = crate::diffgraph::ops_topk(partition, &noisy, logits.tau)?;
    BinaryMask::from_tensor(&hard)
}

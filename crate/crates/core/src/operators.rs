//! Measurement operator families built from binary masks.
//!
//! A [`MaskSpace`] fixes the family, the sizes, and the partition that the
//! mask sampler must respect. Given a mask node on some [`Graph`], it builds
//! an [`Operator`] whose `apply`/`adjoint` are recorded on that graph, so the
//! same code path serves training (on a tape) and evaluation (eagerly).
//!
//! The masked-circulant family keeps measurements at full length `n` with
//! zeros outside the selected rows; multiplying by the row mask rather than
//! gathering keeps the row selection differentiable.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use crate::diffgraph::{Eager, Graph, LinearMap, Tensor};
use crate::gumbel::{BinaryMask, Partition};
use crate::{Error, Result};

/// Which index subsets compete for ones in a dense mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `d` ones per row (single-pixel imaging, pooled tests).
    Rows,
    /// `d` ones per column (left-d-regular bipartite graphs).
    Columns,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Dense(Layout),
    Circulant,
    SuperPixel { height: usize, width: usize, delta: usize },
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Dense(Layout::Rows) => f.write_str("dense-rows"),
            Family::Dense(Layout::Columns) => f.write_str("dense-columns"),
            Family::Circulant => f.write_str("circulant"),
            Family::SuperPixel { delta, .. } => write!(f, "superpixel(Δ={delta})"),
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(Layout::Rows),
            "columns" => Ok(Layout::Columns),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

/// The structured set of masks an experiment searches over.
#[derive(Clone, Debug)]
pub struct MaskSpace {
    family: Family,
    m: usize,
    n: usize,
    d: usize,
    partition: Arc<Partition>,
}

impl MaskSpace {
    /// `m × n` binary matrices with `d` ones per row or per column.
    pub fn dense(m: usize, n: usize, d: usize, layout: Layout) -> Result<Self> {
        let partition = match layout {
            Layout::Rows => Partition::rows(m, n, d)?,
            Layout::Columns => Partition::columns(m, n, d)?,
        };
        Ok(Self { family: Family::Dense(layout), m, n, d, partition: Arc::new(partition) })
    }

    /// `P_Ω C(c)`: a binary generator with `d` ones and `m` selected rows.
    ///
    /// The mask grid is `2 × n`; row 0 is the generator, row 1 the row mask.
    pub fn circulant(m: usize, n: usize, d: usize) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::param("circulant", format!("m={m} outside 1..={n}")));
        }
        let partition = Partition::rows_with_counts(2, n, vec![d, m])?;
        Ok(Self { family: Family::Circulant, m, n, d, partition: Arc::new(partition) })
    }

    /// `m` patterns on an `height × width` image, each the clipped `Δ × Δ`
    /// dilation of `d` centers.
    pub fn superpixel(m: usize, height: usize, width: usize, d: usize, delta: usize) -> Result<Self> {
        check_delta(delta)?;
        let n = height * width;
        let partition = Partition::rows(m, n, d)?;
        Ok(Self { family: Family::SuperPixel { height, width, delta }, m, n, d, partition: Arc::new(partition) })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn partition(&self) -> &Arc<Partition> {
        &self.partition
    }

    /// Length of the measurement vectors produced by [`Operator::apply`].
    pub fn measurement_len(&self) -> usize {
        match self.family {
            Family::Circulant => self.n,
            _ => self.m,
        }
    }

    /// Builds the operator for a mask node on `g`.
    ///
    /// `mask` carries the forward value (hard or relaxed) and the gradient
    /// path; `hard` is the binary realization used for structural data such
    /// as median groups and the circulant measurement support.
    pub fn operator<G: Graph>(&self, g: &mut G, mask: &G::Var, hard: &BinaryMask, scale: f64) -> Result<Operator<G>> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param("operator", format!("scale {scale} must be positive")));
        }
        let shape = g.value(mask).shape().to_vec();
        let grid = [self.partition.grid_rows(), self.partition.grid_cols()];
        if shape != grid || hard.rows() != grid[0] || hard.cols() != grid[1] {
            return Err(Error::dim("operator", format!("mask {shape:?} vs grid {grid:?}")));
        }
        let form = match self.family {
            Family::Dense(_) => Form::Matrix(g.scalar_mul(mask, scale)?),
            Family::SuperPixel { height, width, delta } => {
                let dilate: Arc<dyn LinearMap> = Arc::new(BoxDilate::new(height, width, delta)?);
                let grown = g.linear(&dilate, mask)?;
                let clipped = g.min_one(&grown)?;
                Form::Matrix(g.scalar_mul(&clipped, scale)?)
            }
            Family::Circulant => Form::Circulant {
                generator: g.select_row(mask, 0)?,
                rows: g.select_row(mask, 1)?,
                scale,
            },
        };
        let support = match self.family {
            Family::Circulant => Some(hard.bits()[self.n..].iter().map(|&b| b as f64).collect()),
            _ => None,
        };
        let groups = match self.family {
            Family::Dense(_) => Some(Arc::new(
                (0..self.n).map(|j| (0..self.m).filter(|&i| hard.get(i, j)).collect()).collect(),
            )),
            _ => None,
        };
        Ok(Operator { form, scale, n: self.n, measurement_len: self.measurement_len(), support, groups })
    }

    /// Fixed operator for a binary mask drawn from this space.
    pub fn realize(&self, mask: &BinaryMask, scale: f64) -> Result<MeasurementOperator> {
        if !mask.satisfies(&self.partition) {
            return Err(Error::Structure(format!("mask does not satisfy the {} partition counts", self.family)));
        }
        Ok(match self.family {
            Family::Dense(_) => MeasurementOperator::Dense(DenseOperator { mask: mask.clone(), scale }),
            Family::Circulant => MeasurementOperator::Circulant(MaskedCirculantOperator {
                generator: mask.bits()[..self.n].to_vec(),
                rows: mask.bits()[self.n..].to_vec(),
                scale,
            }),
            Family::SuperPixel { height, width, delta } => MeasurementOperator::SuperPixel(SuperPixelOperator {
                centers: mask.clone(),
                height,
                width,
                delta,
                scale,
            }),
        })
    }
}

fn check_delta(delta: usize) -> Result<()> {
    if delta == 0 || delta % 2 == 0 {
        return Err(Error::param("superpixel", format!("side Δ={delta} must be odd")));
    }
    Ok(())
}

enum Form<V> {
    /// Scaled `m × n` matrix node.
    Matrix(V),
    Circulant { generator: V, rows: V, scale: f64 },
}

/// A measurement operator recorded on graph `G`.
///
/// Signals are batches of rows (`B × n`); measurements are `B × k` with `k`
/// the space's [`measurement_len`](MaskSpace::measurement_len).
pub struct Operator<G: Graph> {
    form: Form<G::Var>,
    scale: f64,
    n: usize,
    measurement_len: usize,
    support: Option<Vec<f64>>,
    groups: Option<Arc<Vec<Vec<usize>>>>,
}

impl<G: Graph> Operator<G> {
    /// An arbitrary real `m × n` matrix node, without median groups.
    pub fn from_matrix(g: &G, phi: G::Var) -> Result<Self> {
        let t = g.value(&phi);
        if t.rank() != 2 {
            return Err(Error::dim("operator", format!("matrix expected, got shape {:?}", t.shape())));
        }
        let (m, n) = (t.rows(), t.cols());
        Ok(Self { form: Form::Matrix(phi), scale: 1.0, n, measurement_len: m, support: None, groups: None })
    }

    /// Replaces the median groups, e.g. for a graph given as a real matrix.
    pub fn with_median_groups(mut self, groups: Vec<Vec<usize>>) -> Self {
        self.groups = Some(Arc::new(groups));
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn signal_len(&self) -> usize {
        self.n
    }

    pub fn measurement_len(&self) -> usize {
        self.measurement_len
    }

    /// 0/1 indicator of the measurement entries that are actually observed,
    /// when not all of them are.
    pub fn support(&self) -> Option<&[f64]> {
        self.support.as_deref()
    }

    /// Per-signal-coordinate lists of connected measurements.
    pub fn median_groups(&self) -> Option<&Arc<Vec<Vec<usize>>>> {
        self.groups.as_ref()
    }

    pub fn apply(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match &self.form {
            Form::Matrix(phi) => g.matmul_t(x, false, phi, true),
            Form::Circulant { generator, rows, scale } => {
                let z = g.circ_conv(generator, x, false)?;
                let z = g.mul_rows(&z, rows)?;
                g.scalar_mul(&z, *scale)
            }
        }
    }

    pub fn adjoint(&self, g: &mut G, y: &G::Var) -> Result<G::Var> {
        match &self.form {
            Form::Matrix(phi) => g.matmul(y, phi),
            Form::Circulant { generator, rows, scale } => {
                let z = g.mul_rows(y, rows)?;
                let z = g.circ_conv(generator, &z, true)?;
                g.scalar_mul(&z, *scale)
            }
        }
    }

    /// `ℳ(y)`: median of the measurements connected to each coordinate.
    ///
    /// `y` is not rescaled, so `ℳ(Φx) ≈ scale · x` and the operator scale
    /// acts as the step size of the median-based solvers.
    pub fn median(&self, g: &mut G, y: &G::Var) -> Result<G::Var> {
        let groups = self
            .groups
            .as_ref()
            .ok_or_else(|| Error::param("median", "median decoding needs a dense graph operator"))?;
        g.median_select(y, groups)
    }
}

/// Row-wise zero-padded `Δ × Δ` box sum on `height × width` images.
#[derive(Clone, Debug)]
pub struct BoxDilate {
    height: usize,
    width: usize,
    delta: usize,
}

impl BoxDilate {
    pub fn new(height: usize, width: usize, delta: usize) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { height, width, delta })
    }
}

impl LinearMap for BoxDilate {
    fn input_len(&self) -> usize {
        self.height * self.width
    }

    fn output_len(&self) -> usize {
        self.height * self.width
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        let (h, w, r) = (self.height, self.width, self.delta / 2);
        // separable: horizontal box sum, then vertical
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (lo, hi) = (j.saturating_sub(r), (j + r).min(w - 1));
                tmp[i * w + j] = x[i * w + lo..=i * w + hi].iter().sum();
            }
        }
        for i in 0..h {
            let (lo, hi) = (i.saturating_sub(r), (i + r).min(h - 1));
            for j in 0..w {
                out[i * w + j] = (lo..=hi).map(|k| tmp[k * w + j]).sum();
            }
        }
    }

    fn adjoint_row(&self, y: &[f64], out: &mut [f64]) {
        // symmetric kernel with zero padding: self-adjoint
        self.apply_row(y, out);
    }
}

/// Clipped dilation of a center indicator image by a `Δ × Δ` block of ones.
pub fn superpixel_expand(centers: &Tensor, height: usize, width: usize, delta: usize) -> Result<Tensor> {
    if centers.len() != height * width {
        return Err(Error::dim("superpixel_expand", format!("{} values for a {height}×{width} image", centers.len())));
    }
    let map: Arc<dyn LinearMap> = Arc::new(BoxDilate::new(height, width, delta)?);
    let mut g = Eager;
    let c = g.constant(centers.clone().reshape(vec![height * width])?);
    let grown = g.linear(&map, &c)?;
    Rc::unwrap_or_clone(g.min_one(&grown)?).reshape(centers.shape().to_vec())
}

/// 16 log-spaced candidates in `[10⁻³, 10¹]`.
pub fn default_scale_grid() -> Vec<f64> {
    (0..16).map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / 15.0)).collect()
}

/// Factor applied to the selected scale for image data.
pub const IMAGE_SCALE_DAMPING: f64 = 0.9;

/// Picks the grid point with the lowest `loss`; candidates whose loss is
/// non-finite or whose solver diverges are skipped.
pub fn grid_search_scale(grid: &[f64], image_mode: bool, mut loss: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("scale grid is empty".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &scale in grid {
        let l = match loss(scale) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. } | Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((scale, l));
        }
    }
    let (scale, _) = best.ok_or_else(|| Error::Config("every scale candidate produced a non-finite loss".into()))?;
    Ok(if image_mode { scale * IMAGE_SCALE_DAMPING } else { scale })
}

/// `scale · mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    pub mask: BinaryMask,
    pub scale: f64,
}

/// `scale · P_Ω C(c)` with binary generator `c` and row selection `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCirculantOperator {
    pub generator: Vec<u8>,
    pub rows: Vec<u8>,
    pub scale: f64,
}

/// `scale · min(box(centers), 1)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperPixelOperator {
    pub centers: BinaryMask,
    pub height: usize,
    pub width: usize,
    pub delta: usize,
    pub scale: f64,
}

/// A frozen operator from one of the three families.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOperator {
    Dense(DenseOperator),
    Circulant(MaskedCirculantOperator),
    SuperPixel(SuperPixelOperator),
}

impl MeasurementOperator {
    pub fn scale(&self) -> f64 {
        match self {
            MeasurementOperator::Dense(o) => o.scale,
            MeasurementOperator::Circulant(o) => o.scale,
            MeasurementOperator::SuperPixel(o) => o.scale,
        }
    }

    pub fn signal_len(&self) -> usize {
        match self {
            MeasurementOperator::Dense(o) => o.mask.cols(),
            MeasurementOperator::Circulant(o) => o.generator.len(),
            MeasurementOperator::SuperPixel(o) => o.centers.cols(),
        }
    }

    /// Dense `m × n` matrix of the operator (selected rows only for the
    /// circulant family).
    pub fn to_dense(&self) -> Result<Tensor> {
        match self {
            MeasurementOperator::Dense(o) => Ok(o.mask.to_tensor().map(|v| v * o.scale)),
            MeasurementOperator::Circulant(o) => {
                let n = o.generator.len();
                let selected: Vec<usize> = (0..n).filter(|&i| o.rows[i] == 1).collect();
                let mut t = Tensor::zeros(&[selected.len(), n]);
                for (r, &i) in selected.iter().enumerate() {
                    for j in 0..n {
                        t.row_mut(r)[j] = o.scale * o.generator[(i + n - j) % n] as f64;
                    }
                }
                Ok(t)
            }
            MeasurementOperator::SuperPixel(o) => {
                let mut t = Tensor::zeros(&[o.centers.rows(), o.centers.cols()]);
                for r in 0..o.centers.rows() {
                    let row = Tensor::vector(o.centers.bits()[r * o.centers.cols()..(r + 1) * o.centers.cols()]
                        .iter()
                        .map(|&b| b as f64)
                        .collect());
                    let grown = superpixel_expand(&row, o.height, o.width, o.delta)?;
                    for (dst, v) in t.row_mut(r).iter_mut().zip(grown.data()) {
                        *dst = o.scale * v;
                    }
                }
                Ok(t)
            }
        }
    }

    /// `Φ x` for one signal; circulant outputs keep only the selected rows.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.signal_len() {
            return Err(Error::dim("apply", format!("signal length {} vs {}", x.len(), self.signal_len())));
        }
        match self {
            MeasurementOperator::Circulant(o) => {
                let gen: Vec<f64> = o.generator.iter().map(|&b| b as f64).collect();
                let z = crate::diffgraph::circular::circ_rows(&gen, &Tensor::vector(x.to_vec()), false)?;
                Ok(z.data().iter().zip(&o.rows).filter(|(_, r)| **r == 1).map(|(v, _)| o.scale * v).collect())
            }
            _ => {
                let phi = self.to_dense()?;
                Ok(phi.data().chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
            }
        }
    }

    /// `Φᵀ y` for one measurement vector.
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            MeasurementOperator::Circulant(o) => {
                let n = o.generator.len();
                let mut full = vec![0.0; n];
                let mut it = y.iter();
                for (f, _) in full.iter_mut().zip(&o.rows).filter(|(_, r)| **r == 1) {
                    *f = *it.next().ok_or_else(|| Error::dim("adjoint", "too few measurements"))?;
                }
                if it.next().is_some() {
                    return Err(Error::dim("adjoint", "too many measurements"));
                }
                let gen: Vec<f64> = o.generator.iter().map(|&b| b as f64).collect();
                let z = crate::diffgraph::circular::circ_rows(&gen, &Tensor::vector(full), true)?;
                Ok(z.data().iter().map(|v| o.scale * v).collect())
            }
            _ => {
                let phi = self.to_dense()?;
                if y.len() != phi.rows() {
                    return Err(Error::dim("adjoint", format!("measurement length {} vs {}", y.len(), phi.rows())));
                }
                let mut out = vec![0.0; phi.cols()];
                for (r, &yr) in y.iter().enumerate() {
                    for (o, a) in out.iter_mut().zip(phi.row(r)) {
                        *o += a * yr;
                    }
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::Tape;
    use crate::gumbel::{freeze_mask, MaskLogits};
    use crate::rng::seeded;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_mask(space: &MaskSpace, seed: u64) -> BinaryMask {
        let p = space.partition();
        let logits = MaskLogits::new(Tensor::zeros(&[p.grid_rows(), p.grid_cols()]), 1.0, 1.0).unwrap();
        freeze_mask(&logits, p, &mut seeded(seed, 0)).unwrap()
    }

    fn eager_apply(space: &MaskSpace, mask: &BinaryMask, scale: f64, x: &[f64]) -> Vec<f64> {
        let mut g = Eager;
        let mv = g.constant(mask.to_tensor());
        let op = space.operator(&mut g, &mv, mask, scale).unwrap();
        let xv = g.constant(Tensor::vector(x.to_vec()));
        op.apply(&mut g, &xv).unwrap().data().to_vec()
    }

    #[test]
    fn identity_mask_is_identity() {
        let space = MaskSpace::dense(4, 4, 1, Layout::Rows).unwrap();
        let mask = BinaryMask::from_tensor(&Tensor::identity(4)).unwrap();
        let x = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(eager_apply(&space, &mask, 1.0, &x), x);
    }

    #[test]
    fn all_ones_row_sums_pixels() {
        let space = MaskSpace::dense(1, 3, 3, Layout::Rows).unwrap();
        let mask = BinaryMask::new(1, 3, vec![1, 1, 1]).unwrap();
        assert_eq!(eager_apply(&space, &mask, 2.0, &[1.0, 2.0, 3.0]), vec![12.0]);
    }

    #[test]
    fn dense_gradient_wrt_signal_matches_fd() {
        let mut rng = seeded(3, 0);
        let space = MaskSpace::dense(5, 8, 3, Layout::Rows).unwrap();
        let mask = random_mask(&space, 4);
        let x = random_vec(&mut rng, 8);
        let w = random_vec(&mut rng, 5);
        let f = |x: &[f64]| -> f64 { eager_apply(&space, &mask, 0.7, x).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let mut tape = Tape::new();
        let mv = tape.constant(mask.to_tensor());
        let op = space.operator(&mut tape, &mv, &mask, 0.7).unwrap();
        let xv = tape.leaf(Tensor::vector(x.clone()));
        let y = op.apply(&mut tape, &xv).unwrap();
        let wv = tape.constant(Tensor::vector(w.clone()));
        let p = tape.mul(&y, &wv).unwrap();
        let s = tape.sum(&p).unwrap();
        let grad = tape.backward(s).unwrap().get(xv);
        for i in 0..8 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((grad.data()[i] - fd).abs() <= 1e-8);
        }
    }

    #[test]
    fn identity_generator_selects_rows_of_x() {
        let space = MaskSpace::circulant(3, 6, 1).unwrap();
        let mut bits = vec![0u8; 12];
        bits[0] = 1;
        for i in [6 + 1, 6 + 2, 6 + 5] {
            bits[i] = 1;
        }
        let mask = BinaryMask::new(2, 6, bits).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let op = space.realize(&mask, 1.0).unwrap();
        let y = op.apply(&x).unwrap();
        assert!(y.iter().zip([2.0, 3.0, 6.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let padded = eager_apply(&space, &mask, 1.0, &x);
        assert!(padded.iter().zip([0.0, 2.0, 3.0, 0.0, 0.0, 6.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn circulant_matches_dense_oracle() {
        let mut rng = seeded(9, 0);
        for n in [8, 64, 256] {
            for trial in 0..5 {
                let space = MaskSpace::circulant(n / 2, n, 3).unwrap();
                let mask = random_mask(&space, trial);
                let op = space.realize(&mask, 1.3).unwrap();
                let dense = op.to_dense().unwrap();
                let x = random_vec(&mut rng, n);
                let y = op.apply(&x).unwrap();
                for (r, yr) in y.iter().enumerate() {
                    let oracle: f64 = dense.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
                    assert!((yr - oracle).abs() <= 1e-10, "n={n}");
                }
                let z = random_vec(&mut rng, n / 2);
                let adj = op.adjoint(&z).unwrap();
                for (j, aj) in adj.iter().enumerate() {
                    let oracle: f64 = (0..n / 2).map(|r| dense.row(r)[j] * z[r]).sum();
                    assert!((aj - oracle).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn circulant_graph_adjoint_matches_dense_gradient() {
        let mut rng = seeded(10, 0);
        let n = 16;
        let space = MaskSpace::circulant(6, n, 3).unwrap();
        let mask = random_mask(&space, 2);
        let dense = space.realize(&mask, 1.0).unwrap().to_dense().unwrap();
        let rows: Vec<usize> = (0..n).filter(|&i| mask.get(1, i)).collect();
        let w = random_vec(&mut rng, n);
        let x = random_vec(&mut rng, n);
        let mut tape = Tape::new();
        let mv = tape.constant(mask.to_tensor());
        let op = space.operator(&mut tape, &mv, &mask, 1.0).unwrap();
        let xv = tape.leaf(Tensor::vector(x));
        let y = op.apply(&mut tape, &xv).unwrap();
        let wv = tape.constant(Tensor::vector(w.clone()));
        let p = tape.mul(&y, &wv).unwrap();
        let s = tape.sum(&p).unwrap();
        let grad = tape.backward(s).unwrap().get(xv);
        for j in 0..n {
            let oracle: f64 = rows.iter().enumerate().map(|(r, &i)| dense.row(r)[j] * w[i]).sum();
            assert!((grad.data()[j] - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn dense_adjoint_identity_and_linearity() {
        let mut rng = seeded(11, 0);
        let spaces = [
            MaskSpace::dense(6, 10, 3, Layout::Rows).unwrap(),
            MaskSpace::dense(6, 10, 2, Layout::Columns).unwrap(),
            MaskSpace::circulant(5, 10, 3).unwrap(),
            MaskSpace::superpixel(3, 4, 5, 2, 3).unwrap(),
        ];
        for (k, space) in spaces.iter().enumerate() {
            let mask = random_mask(space, k as u64);
            let op = space.realize(&mask, 0.8).unwrap();
            let n = op.signal_len();
            let x1 = random_vec(&mut rng, n);
            let x2 = random_vec(&mut rng, n);
            let y1 = op.apply(&x1).unwrap();
            let z = random_vec(&mut rng, y1.len());
            let lhs: f64 = y1.iter().zip(&z).map(|(a, b)| a * b).sum();
            let rhs: f64 = x1.iter().zip(op.adjoint(&z).unwrap()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10);
            let combo: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| -1.5 * a + b).collect();
            let yc = op.apply(&combo).unwrap();
            let y2 = op.apply(&x2).unwrap();
            for i in 0..yc.len() {
                assert!((yc[i] - (-1.5 * y1[i] + y2[i])).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn superpixel_single_center_is_a_block() {
        let mut c = Tensor::zeros(&[5, 5]);
        c.data_mut()[2 * 5 + 2] = 1.0;
        let out = superpixel_expand(&c, 5, 5, 3).unwrap();
        for r in 0..5 {
            for col in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&col);
                assert_eq!(out.data()[r * 5 + col], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn superpixel_separate_and_overlapping_centers() {
        let mut c = Tensor::zeros(&[8, 8]);
        c.data_mut()[2 * 8 + 2] = 1.0;
        c.data_mut()[5 * 8 + 5] = 1.0;
        assert_eq!(superpixel_expand(&c, 8, 8, 3).unwrap().sum(), 18.0);

        let mut c = Tensor::zeros(&[8, 8]);
        c.data_mut()[3 * 8 + 3] = 1.0;
        c.data_mut()[3 * 8 + 4] = 1.0;
        let out = superpixel_expand(&c, 8, 8, 3).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.sum(), 12.0);
    }

    #[test]
    fn superpixel_border_is_zero_padded_and_even_side_rejected() {
        let mut c = Tensor::zeros(&[4, 4]);
        c.data_mut()[0] = 1.0;
        assert_eq!(superpixel_expand(&c, 4, 4, 3).unwrap().sum(), 4.0);
        assert!(matches!(superpixel_expand(&c, 4, 4, 2), Err(Error::Parameter { .. })));
    }

    #[test]
    fn clip_gradient_is_zero_at_one() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![0.5, 1.0, 2.0]));
        let out = tape.min_one(&v).unwrap();
        let s = tape.sum(&out).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(v).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_search_examples() {
        assert_eq!(grid_search_scale(&[0.3], false, |_| Ok(1.0)).unwrap(), 0.3);
        assert!((grid_search_scale(&[0.3], true, |_| Ok(1.0)).unwrap() - 0.27).abs() < 1e-15);
        let grid = default_scale_grid();
        assert_eq!(grid.len(), 16);
        assert!((grid[0] - 1e-3).abs() < 1e-15 && (grid[15] - 10.0).abs() < 1e-12);
        // convex in log-scale around 0.1
        let best = grid_search_scale(&grid, false, |s| Ok((s.log10() + 1.0).powi(2))).unwrap();
        let oracle = grid.iter().copied().min_by(|a, b| (a.log10() + 1.0).abs().total_cmp(&(b.log10() + 1.0).abs())).unwrap();
        assert_eq!(best, oracle);
        assert!(grid_search_scale(&[], false, |_| Ok(0.0)).is_err());
        assert!(matches!(grid_search_scale(&grid, false, |_| Ok(f64::NAN)), Err(Error::Config(_))));
        assert_eq!(grid_search_scale(&[1.0, 2.0], false, |s| if s > 1.5 { Ok(0.0) } else { Err(Error::Divergence { iteration: 1 }) }).unwrap(), 2.0);
    }

    #[test]
    fn median_groups_follow_mask_columns() {
        let space = MaskSpace::dense(3, 2, 2, Layout::Columns).unwrap();
        let mask = BinaryMask::new(3, 2, vec![1, 0, 1, 1, 0, 1]).unwrap();
        let mut g = Eager;
        let mv = g.constant(mask.to_tensor());
        let op = space.operator(&mut g, &mv, &mask, 1.0).unwrap();
        assert_eq!(op.median_groups().unwrap().as_ref(), &vec![vec![0, 1], vec![1, 2]]);
    }
}

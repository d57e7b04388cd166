//! Single-level separable wavelet transforms on `h × w` images stored as
//! flat row-major vectors.
//!
//! Both wavelets are implemented by lifting, so the inverse is exact by
//! construction and the adjoints follow by transposing each lifting step.
//! Coefficients are laid out as four concatenated `h/2 × w/2` bands:
//! `LL`, `LH` (low horizontally, high vertically), `HL`, `HH`.
//!
//! The CDF 5/3 filter pair (`bior2.2`) uses whole-sample symmetric
//! extension at the borders, which keeps each band at exactly half size.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::diffgraph::LinearMap;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Identity,
    Haar1,
    Bior22Level1,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Haar1 => "haar1",
            TransformKind::Bior22Level1 => "bior2.2-level1",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "haar1" | "haar" => Ok(TransformKind::Haar1),
            "bior2.2-level1" | "bior2.2" => Ok(TransformKind::Bior22Level1),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

/// One lifting update `target[i] += coeff · Σ_k source[reflect(i + taps[k])]`.
struct Lift {
    onto_odd: bool,
    coeff: f64,
    taps: &'static [isize],
}

struct Wavelet {
    lifts: &'static [Lift],
    low_gain: f64,
    high_gain: f64,
}

const HAAR: Wavelet = Wavelet {
    lifts: &[
        Lift { onto_odd: true, coeff: -1.0, taps: &[0] },
        Lift { onto_odd: false, coeff: 0.5, taps: &[0] },
    ],
    low_gain: SQRT_2,
    high_gain: -1.0 / SQRT_2,
};

const CDF53: Wavelet = Wavelet {
    lifts: &[
        Lift { onto_odd: true, coeff: -0.5, taps: &[0, 1] },
        Lift { onto_odd: false, coeff: 0.25, taps: &[-1, 0] },
    ],
    low_gain: SQRT_2,
    high_gain: 1.0 / SQRT_2,
};

fn reflect(j: isize, half: usize) -> usize {
    let h = half as isize;
    let j = if j < 0 { -1 - j } else if j >= h { 2 * h - 1 - j } else { j };
    j.clamp(0, h - 1) as usize
}

impl Wavelet {
    /// Applies one lifting step (or its transpose) in place on the split
    /// even/odd halves.
    fn lift(step: &Lift, even: &mut [f64], odd: &mut [f64], sign: f64, transpose: bool) {
        let half = even.len();
        let (target, source) = if step.onto_odd { (odd, even) } else { (even, odd) };
        let c = sign * step.coeff;
        if transpose {
            for i in 0..half {
                for &t in step.taps {
                    source[reflect(i as isize + t, half)] += c * target[i];
                }
            }
        } else {
            for i in 0..half {
                let acc: f64 = step.taps.iter().map(|&t| source[reflect(i as isize + t, half)]).sum();
                target[i] += c * acc;
            }
        }
    }

    /// Natural-order signal → `[low | high]`.
    fn analysis(&self, x: &[f64], out: &mut [f64]) {
        let half = x.len() / 2;
        let (even, odd) = out.split_at_mut(half);
        for i in 0..half {
            even[i] = x[2 * i];
            odd[i] = x[2 * i + 1];
        }
        for step in self.lifts {
            Self::lift(step, even, odd, 1.0, false);
        }
        even.iter_mut().for_each(|v| *v *= self.low_gain);
        odd.iter_mut().for_each(|v| *v *= self.high_gain);
    }

    /// `[low | high]` → natural order; exact inverse of `analysis`.
    fn synthesis(&self, c: &[f64], out: &mut [f64]) {
        let half = c.len() / 2;
        let mut even: Vec<f64> = c[..half].iter().map(|v| v / self.low_gain).collect();
        let mut odd: Vec<f64> = c[half..].iter().map(|v| v / self.high_gain).collect();
        for step in self.lifts.iter().rev() {
            Self::lift(step, &mut even, &mut odd, -1.0, false);
        }
        for i in 0..half {
            out[2 * i] = even[i];
            out[2 * i + 1] = odd[i];
        }
    }

    /// Transpose of `analysis`: `[low | high]` → natural order.
    fn analysis_adjoint(&self, c: &[f64], out: &mut [f64]) {
        let half = c.len() / 2;
        let mut even: Vec<f64> = c[..half].iter().map(|v| v * self.low_gain).collect();
        let mut odd: Vec<f64> = c[half..].iter().map(|v| v * self.high_gain).collect();
        for step in self.lifts.iter().rev() {
            Self::lift(step, &mut even, &mut odd, 1.0, true);
        }
        for i in 0..half {
            out[2 * i] = even[i];
            out[2 * i + 1] = odd[i];
        }
    }

    /// Transpose of `synthesis`: natural order → `[low | high]`.
    fn synthesis_adjoint(&self, x: &[f64], out: &mut [f64]) {
        let half = x.len() / 2;
        let (even, odd) = out.split_at_mut(half);
        for i in 0..half {
            even[i] = x[2 * i];
            odd[i] = x[2 * i + 1];
        }
        for step in self.lifts {
            Self::lift(step, even, odd, -1.0, true);
        }
        even.iter_mut().for_each(|v| *v /= self.low_gain);
        odd.iter_mut().for_each(|v| *v /= self.high_gain);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Analysis,
    Synthesis,
    AnalysisAdjoint,
    SynthesisAdjoint,
}

impl Direction {
    fn adjoint(self) -> Self {
        match self {
            Direction::Analysis => Direction::AnalysisAdjoint,
            Direction::Synthesis => Direction::SynthesisAdjoint,
            Direction::AnalysisAdjoint => Direction::Analysis,
            Direction::SynthesisAdjoint => Direction::Synthesis,
        }
    }

    /// Whether the map goes from image order to the banded coefficient layout.
    fn to_bands(self) -> bool {
        matches!(self, Direction::Analysis | Direction::SynthesisAdjoint)
    }
}

/// A sparsifying transform Ψ for `height × width` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    kind: TransformKind,
    height: usize,
    width: usize,
}

impl Transform {
    pub fn new(kind: TransformKind, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("transform", "empty image"));
        }
        if kind != TransformKind::Identity && (height % 2 != 0 || width % 2 != 0) {
            return Err(Error::dim("transform", format!("{kind} needs even dimensions, got {height}×{width}")));
        }
        Ok(Self { kind, height, width })
    }

    /// The identity transform on vectors of length `n`.
    pub fn identity(n: usize) -> Self {
        Self { kind: TransformKind::Identity, height: 1, width: n.max(1) }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_identity(&self) -> bool {
        self.kind == TransformKind::Identity
    }

    fn wavelet(&self) -> Option<&'static Wavelet> {
        match self.kind {
            TransformKind::Identity => None,
            TransformKind::Haar1 => Some(&HAAR),
            TransformKind::Bior22Level1 => Some(&CDF53),
        }
    }

    fn check(&self, op: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::dim(op, format!("expected length {}, got {}", self.len(), v.len())));
        }
        Ok(())
    }

    pub fn analysis(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.check("analysis", image)?;
        let mut out = vec![0.0; self.len()];
        self.run(Direction::Analysis, image, &mut out);
        Ok(out)
    }

    pub fn synthesis(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check("synthesis", coeffs)?;
        let mut out = vec![0.0; self.len()];
        self.run(Direction::Synthesis, coeffs, &mut out);
        Ok(out)
    }

    /// Synthesis as a graph-ready linear map; its adjoint drives backward.
    pub fn synthesis_map(&self) -> Arc<dyn LinearMap> {
        Arc::new(TransformMap { transform: *self, direction: Direction::Synthesis })
    }

    /// `Ψ*ᵀ`, the adjoint of synthesis, as a forward map.
    pub fn synthesis_adjoint_map(&self) -> Arc<dyn LinearMap> {
        Arc::new(TransformMap { transform: *self, direction: Direction::SynthesisAdjoint })
    }

    pub fn analysis_map(&self) -> Arc<dyn LinearMap> {
        Arc::new(TransformMap { transform: *self, direction: Direction::Analysis })
    }

    fn run(&self, dir: Direction, input: &[f64], out: &mut [f64]) {
        let Some(wavelet) = self.wavelet() else {
            out.copy_from_slice(input);
            return;
        };
        let one_d = |x: &[f64], y: &mut [f64]| match dir {
            Direction::Analysis => wavelet.analysis(x, y),
            Direction::Synthesis => wavelet.synthesis(x, y),
            Direction::AnalysisAdjoint => wavelet.analysis_adjoint(x, y),
            Direction::SynthesisAdjoint => wavelet.synthesis_adjoint(x, y),
        };
        let (h, w) = (self.height, self.width);
        // Work in a "split image" layout where rows and columns are each
        // arranged as [low | high]; the banded vector is a permutation of it.
        let mut grid = if dir.to_bands() { input.to_vec() } else { self.unpack_bands(input) };
        let mut line = vec![0.0; w.max(h)];
        for r in 0..h {
            let row = &mut grid[r * w..(r + 1) * w];
            one_d(row, &mut line[..w]);
            row.copy_from_slice(&line[..w]);
        }
        let mut col = vec![0.0; h];
        for c in 0..w {
            for r in 0..h {
                col[r] = grid[r * w + c];
            }
            one_d(&col, &mut line[..h]);
            for r in 0..h {
                grid[r * w + c] = line[r];
            }
        }
        if dir.to_bands() {
            self.pack_bands(&grid, out);
        } else {
            out.copy_from_slice(&grid);
        }
    }

    /// Band index order: LL, LH, HL, HH, each `h/2 × w/2` row-major.
    fn band_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let (h, w) = (self.height, self.width);
        let (hh, hw) = (h / 2, w / 2);
        [(0, 0), (hh, 0), (0, hw), (hh, hw)]
            .into_iter()
            .flat_map(move |(r0, c0)| (0..hh).flat_map(move |r| (0..hw).map(move |c| (r0 + r) * w + c0 + c)))
    }

    fn pack_bands(&self, grid: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(self.band_positions()) {
            *o = grid[p];
        }
    }

    fn unpack_bands(&self, bands: &[f64]) -> Vec<f64> {
        let mut grid = vec![0.0; self.len()];
        for (b, p) in bands.iter().zip(self.band_positions()) {
            grid[p] = *b;
        }
        grid
    }
}

#[derive(Debug)]
struct TransformMap {
    transform: Transform,
    direction: Direction,
}

impl LinearMap for TransformMap {
    fn input_len(&self) -> usize {
        self.transform.len()
    }

    fn output_len(&self) -> usize {
        self.transform.len()
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        self.transform.run(self.direction, x, out);
    }

    fn adjoint_row(&self, y: &[f64], out: &mut [f64]) {
        self.transform.run(self.direction.adjoint(), y, out);
    }
}

//! Synthetic sparse signals and IDX image files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::diffgraph::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsityMode {
    /// Each entry is nonzero independently with probability `s / n`.
    Bernoulli,
    /// Exactly `s` nonzeros at uniformly drawn positions.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Amplitude {
    Gaussian,
    /// Beta(2, 8): positive amplitudes in `(0, 1)` with mean 0.2.
    Beta28,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub s: usize,
    pub mode: SparsityMode,
    pub amplitude: Amplitude,
}

impl SyntheticSpec {
    pub fn new(n: usize, s: usize, mode: SparsityMode, amplitude: Amplitude) -> Result<Self> {
        if s == 0 || s > n {
            return Err(Error::param("gen_sparse", format!("sparsity {s} outside 1..={n}")));
        }
        Ok(Self { n, s, mode, amplitude })
    }
}

/// `count × n` batch of sparse signals.
pub fn gen_sparse<R: Rng + ?Sized>(spec: &SyntheticSpec, count: usize, rng: &mut R) -> Tensor {
    let beta = Beta::new(2.0, 8.0).expect("valid Beta parameters");
    let draw = |rng: &mut R| match spec.amplitude {
        Amplitude::Gaussian => StandardNormal.sample(rng),
        Amplitude::Beta28 => beta.sample(rng),
    };
    let n = spec.n;
    let mut out = Tensor::zeros(&[count, n]);
    let p = spec.s as f64 / n as f64;
    for r in 0..count {
        let row = out.row_mut(r);
        match spec.mode {
            SparsityMode::Bernoulli => {
                for v in row.iter_mut() {
                    if rng.random::<f64>() < p {
                        *v = draw(rng);
                    }
                }
            }
            SparsityMode::Exact => {
                let mut idx = sample(rng, n, spec.s).into_vec();
                idx.sort_unstable();
                for i in idx {
                    row[i] = draw(rng);
                }
            }
        }
    }
    out
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Contents of an IDX file: `u8` payload with its dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxData {
    /// Images as `count × (rows·cols)` values in `[0, 1]`.
    pub fn images(&self) -> Result<Tensor> {
        if self.magic != IDX_IMAGES_MAGIC || self.dims.len() != 3 {
            return Err(Error::Format { offset: 0, detail: "not an IDX image file".into() });
        }
        let n = self.dims[1] * self.dims[2];
        Tensor::new(vec![self.dims[0], n], self.bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset: offset as u64, detail: "truncated header".into() })
}

/// Parses an IDX image (`0x803`) or label (`0x801`) container.
pub fn parse_idx(buf: &[u8]) -> Result<IdxData> {
    let magic = be_u32(buf, 0)?;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Format { offset: 0, detail: format!("bad magic 0x{other:08x}") }),
    };
    let dims = (0..rank).map(|k| be_u32(buf, 4 + 4 * k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    if buf.len() < header + len {
        return Err(Error::Format {
            offset: buf.len() as u64,
            detail: format!("payload truncated: expected {len} bytes after the header"),
        });
    }
    if buf.len() > header + len {
        return Err(Error::Format { offset: (header + len) as u64, detail: "trailing bytes".into() });
    }
    Ok(IdxData { magic, dims, bytes: buf[header..].to_vec() })
}

/// Serializes `data` in the IDX layout accepted by [`parse_idx`].
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * data.dims.len() + data.bytes.len());
    out.extend_from_slice(&data.magic.to_be_bytes());
    for &d in &data.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&data.bytes);
    out
}

/// Reads an IDX file, transparently gunzipping `*.gz` paths.
pub fn read_idx(path: &Path) -> Result<IdxData> {
    let mut raw = Vec::new();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    }
    parse_idx(&raw)
}

pub fn write_idx(path: &Path, data: &IdxData) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_idx(data)).map_err(|e| Error::io(path, e))
}

/// Images as flat `[0, 1]` vectors.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    read_idx(path)?.images()
}

/// Selects the listed rows of a batch.
pub fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut out = Tensor::zeros(&[rows.len(), cols]);
    for (dst, &r) in rows.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(t.row(r));
    }
    out
}

//! On-disk artifacts: GLDM matrix files, PGM mask images, metric CSVs,
//! checkpoints and the hashed manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffgraph::Tensor;
use crate::gumbel::{BinaryMask, MaskLogits};
use crate::rng::StreamState;
use crate::solvers::SolverParams;
use crate::training::{AdamState, MetricRecord, TrainState};
use crate::{Error, Result};

pub const GLDM_MAGIC: &[u8; 8] = b"GLDM0001";
const DTYPE_F64: u32 = 0;
const DTYPE_BINARY: u32 = 1;

/// Payload of a GLDM file.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixData {
    F64(Vec<f64>),
    /// One byte per entry, each 0 or 1.
    Binary(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub dims: Vec<usize>,
    pub data: MatrixData,
}

impl Matrix {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { dims: t.shape().to_vec(), data: MatrixData::F64(t.data().to_vec()) }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: MatrixData::Binary(m.bits().to_vec()) }
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        match (&self.data, self.dims.as_slice()) {
            (MatrixData::Binary(bits), [r, c]) => BinaryMask::new(*r, *c, bits.clone()),
            _ => Err(Error::Format { offset: 0, detail: "expected a rank-2 binary matrix".into() }),
        }
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            MatrixData::F64(v) => Ok(v.clone()),
            MatrixData::Binary(_) => Err(Error::Format { offset: 0, detail: "expected an f64 matrix".into() }),
        }
    }
}

/// `magic ‖ rank ‖ dims ‖ dtype ‖ payload`, integers u32 little-endian.
pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let count: usize = m.dims.iter().product();
    let (dtype, payload_len) = match &m.data {
        MatrixData::F64(v) => (DTYPE_F64, v.len()),
        MatrixData::Binary(v) => (DTYPE_BINARY, v.len()),
    };
    if payload_len != count {
        return Err(Error::dim("encode_matrix", format!("dims {:?} vs {payload_len} entries", m.dims)));
    }
    let mut out = Vec::with_capacity(16 + 4 * m.dims.len() + 8 * count);
    out.extend_from_slice(GLDM_MAGIC);
    out.extend_from_slice(&(m.dims.len() as u32).to_le_bytes());
    for &d in &m.dims {
        let d = u32::try_from(d).map_err(|_| Error::dim("encode_matrix", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&dtype.to_le_bytes());
    match &m.data {
        MatrixData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        MatrixData::Binary(v) => {
            if let Some(i) = v.iter().position(|&b| b > 1) {
                return Err(Error::param("encode_matrix", format!("binary entry {i} is {}", v[i])));
            }
            out.extend_from_slice(v)
        }
    }
    Ok(out)
}

fn le_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset: offset as u64, detail: "truncated header".into() })
}

pub fn decode_matrix(buf: &[u8]) -> Result<Matrix> {
    if buf.len() < 8 || &buf[..8] != GLDM_MAGIC {
        return Err(Error::Format { offset: 0, detail: "missing GLDM0001 magic".into() });
    }
    let rank = le_u32(buf, 8)? as usize;
    if rank > 8 {
        return Err(Error::Format { offset: 8, detail: format!("implausible rank {rank}") });
    }
    let dims = (0..rank).map(|k| le_u32(buf, 12 + 4 * k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let dtype_at = 12 + 4 * rank;
    let dtype = le_u32(buf, dtype_at)?;
    let start = dtype_at + 4;
    let count: usize = dims.iter().product();
    let width = match dtype {
        DTYPE_F64 => 8,
        DTYPE_BINARY => 1,
        other => return Err(Error::Format { offset: dtype_at as u64, detail: format!("unknown dtype tag {other}") }),
    };
    let payload = &buf[start..];
    if payload.len() != count * width {
        return Err(Error::Format {
            offset: start as u64,
            detail: format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), count * width),
        });
    }
    let data = if dtype == DTYPE_F64 {
        MatrixData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    } else {
        if let Some(i) = payload.iter().position(|&b| b > 1) {
            return Err(Error::Format { offset: (start + i) as u64, detail: "binary entry is not 0 or 1".into() });
        }
        MatrixData::Binary(payload.to_vec())
    };
    Ok(Matrix { dims, data })
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Binary PGM (`P5`) with ones drawn white.
pub fn encode_pgm(width: usize, height: usize, bits: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(bits.iter().map(|&b| if b != 0 { 255 } else { 0 }));
    out
}

pub fn metrics_csv(history: &[MetricRecord], seed: u64) -> String {
    let mut s = String::from("epoch,split,metric,value,seed\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{seed}", r.epoch, r.split, r.metric, r.value);
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes `manifest.txt` listing every other file under `dir` with its
/// SHA-256, sorted by relative path.
pub fn write_manifest(dir: &Path, header: &[(&str, String)]) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for (k, v) in header {
        let _ = writeln!(text, "{k} {v}");
    }
    for rel in files {
        if rel == Path::new("manifest.txt") {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(text, "{}  {}", sha256_hex(&bytes), rel.to_string_lossy().replace('\\', "/"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Saves a training state as `checkpoint.gldm` (all floats, bit-exact) and
/// `checkpoint.txt` (shapes, counters and random stream positions).
pub fn save_checkpoint(dir: &Path, st: &TrainState) -> Result<()> {
    let mut blob: Vec<f64> = st.logits.phi.data().to_vec();
    blob.extend(&st.params.gamma);
    blob.extend(&st.params.rho);
    blob.push(st.scale);
    for a in [&st.adam_mask, &st.adam_theta] {
        blob.extend(&a.m);
        blob.extend(&a.v);
    }
    write_matrix(&dir.join("checkpoint.gldm"), &Matrix { dims: vec![blob.len()], data: MatrixData::F64(blob) })?;
    let mut text = String::new();
    let _ = writeln!(text, "epoch = {}", st.epoch);
    let _ = writeln!(text, "logits_rows = {}", st.logits.phi.rows());
    let _ = writeln!(text, "logits_cols = {}", st.logits.phi.cols());
    let _ = writeln!(text, "theta_len = {}", st.params.gamma.len());
    let _ = writeln!(text, "adam_mask_t = {}", st.adam_mask.t);
    let _ = writeln!(text, "adam_theta_t = {}", st.adam_theta.t);
    let _ = writeln!(text, "loss_evaluations = {}", st.loss_evaluations);
    let _ = writeln!(text, "fixed_mask = {}", st.fixed_mask.is_some());
    for (name, s) in [("data_rng", &st.data_rng), ("gumbel_rng", &st.gumbel_rng), ("noise_rng", &st.noise_rng)] {
        let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(text, "{name} = {seed}:{}:{}", s.stream, s.word_pos);
    }
    if let Some(m) = &st.fixed_mask {
        write_matrix(&dir.join("checkpoint_mask.gldm"), &Matrix::from_mask(m))?;
    }
    let path = dir.join("checkpoint.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Hyper-parameters a checkpoint does not store.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointHyper {
    pub lr_mask: f64,
    pub lr_theta: f64,
    pub noise_scale: f64,
    pub tau: f64,
}

pub fn load_checkpoint(dir: &Path, hyper: CheckpointHyper) -> Result<TrainState> {
    let path = dir.join("checkpoint.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = super::config::parse_pairs(&text)?;
    let get = |k: &str| -> Result<&str> {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint.txt: missing `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?.parse().map_err(|_| Error::Config(format!("checkpoint.txt: `{k}` is not an integer")))
    };
    let stream = |k: &str| -> Result<StreamState> {
        let bad = || Error::Config(format!("checkpoint.txt: malformed stream `{k}`"));
        let parts: Vec<&str> = get(k)?.split(':').collect();
        if parts.len() != 3 || parts[0].len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&parts[0][2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(StreamState { seed, stream: parts[1].parse().map_err(|_| bad())?, word_pos: parts[2].parse().map_err(|_| bad())? })
    };
    let (rows, cols, t) = (num("logits_rows")? as usize, num("logits_cols")? as usize, num("theta_len")? as usize);
    let blob = read_matrix(&dir.join("checkpoint.gldm"))?.to_f64()?;
    let k = rows * cols;
    let expected = 1 + 3 * k + 6 * t;
    if blob.len() != expected {
        return Err(Error::Format { offset: 0, detail: format!("checkpoint holds {} values, expected {expected}", blob.len()) });
    }
    let mut it = blob.into_iter();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let phi = Tensor::new(vec![rows, cols], take(k))?;
    let params = SolverParams { gamma: take(t), rho: take(t) };
    let scale = take(1)[0];
    let mut adam_mask = AdamState::new(k, hyper.lr_mask);
    adam_mask.m = take(k);
    adam_mask.v = take(k);
    adam_mask.t = num("adam_mask_t")?;
    let mut adam_theta = AdamState::new(2 * t, hyper.lr_theta);
    adam_theta.m = take(2 * t);
    adam_theta.v = take(2 * t);
    adam_theta.t = num("adam_theta_t")?;
    let fixed_mask = match get("fixed_mask")? {
        "true" => Some(read_matrix(&dir.join("checkpoint_mask.gldm"))?.to_mask()?),
        _ => None,
    };
    Ok(TrainState {
        epoch: num("epoch")? as usize,
        logits: MaskLogits::new(phi, hyper.noise_scale, hyper.tau)?,
        params,
        scale,
        adam_mask,
        adam_theta,
        data_rng: stream("data_rng")?,
        gumbel_rng: stream("gumbel_rng")?,
        noise_rng: stream("noise_rng")?,
        fixed_mask,
        loss_evaluations: num("loss_evaluations")?,
    })
}

//! C interface to `sensemask`.
//!
//! Objects cross the boundary as opaque pointers that the caller releases
//! with the matching `*_free` function. Every entry point returns an
//! [`SmStatus`]; on failure the message is kept per thread and can be
//! copied out with [`sm_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sensemask::cli::artifacts::{read_matrix, write_matrix, Matrix};
use sensemask::cli::config::{ExperimentConfig, RawConfig};
use sensemask::cli::run;
use sensemask::gumbel::BinaryMask;
use sensemask::operators::MeasurementOperator;
use sensemask::Error;

/// Result codes; `SM_OK` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmNullPointer = 1,
    SmInvalidUtf8 = 2,
    SmBufferTooSmall = 3,
    SmDimension = 10,
    SmParameter = 11,
    SmStructure = 12,
    SmNonFinite = 13,
    SmDivergence = 14,
    SmFormat = 15,
    SmConfig = 16,
    SmMetric = 17,
    SmTraining = 18,
    SmIo = 19,
    SmPanic = 99,
}

impl From<&Error> for SmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => SmStatus::SmDimension,
            Error::Parameter { .. } => SmStatus::SmParameter,
            Error::Structure(_) => SmStatus::SmStructure,
            Error::NonFinite { .. } => SmStatus::SmNonFinite,
            Error::Divergence { .. } => SmStatus::SmDivergence,
            Error::Format { .. } => SmStatus::SmFormat,
            Error::Config(_) => SmStatus::SmConfig,
            Error::Metric(_) => SmStatus::SmMetric,
            Error::Training(_) => SmStatus::SmTraining,
            Error::Io { .. } => SmStatus::SmIo,
        }
    }
}

/// Resolved experiment configuration.
pub struct SmConfig {
    raw: RawConfig,
}

/// Binary mask with its grid shape.
pub struct SmMask {
    mask: BinaryMask,
}

/// Frozen measurement operator.
pub struct SmOperator {
    op: MeasurementOperator,
    measurements: usize,
}

/// Held-out metrics of an evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmMetrics {
    pub nmse_db: f64,
    pub nmae_db: f64,
    pub loss: f64,
    pub false_positives: f64,
    pub false_negatives: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(SmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(SmStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SmStatus::SmOk
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sensemask".into());
            SmStatus::SmPanic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SmStatus::SmNullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(SmStatus::SmInvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return if len == 0 { Ok(&mut []) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the message length in bytes (without the NUL); a return
/// value `>= len` means the message was truncated.
///
/// # Safety
/// `buf` must be valid for `len` writable bytes, or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn sm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a `key = value` config. Every field is validated here.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_config_parse(text: *const c_char, out: *mut *mut SmConfig) -> SmStatus {
    guard(|| {
        let raw = RawConfig::from_text(self::text(text, "text")?, &[])?;
        ExperimentConfig::from_raw(&raw)?;
        store(out, SmConfig { raw })
    })
}

/// Sets one key and revalidates; the config is unchanged on failure.
///
/// # Safety
/// `cfg` must come from [`sm_config_parse`]; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_config_set(cfg: *mut SmConfig, key: *const c_char, value: *const c_char) -> SmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let mut raw = cfg.raw.clone();
        raw.set(text(key, "key")?, text(value, "value")?)?;
        ExperimentConfig::from_raw(&raw)?;
        cfg.raw = raw;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from [`sm_config_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_config_free(cfg: *mut SmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains per `cfg`, writes the run artifacts under `out_dir` and returns
/// the learned mask.
///
/// # Safety
/// Pointers must be valid; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_train(cfg: *const SmConfig, out_dir: *const c_char, mask_out: *mut *mut SmMask) -> SmStatus {
    guard(|| {
        let cfg = reference(cfg, "cfg")?;
        let summary = run::run_train(&cfg.raw, &PathBuf::from(text(out_dir, "out_dir")?), None)?;
        store(mask_out, SmMask { mask: summary.mask })
    })
}

/// Runs the configured discrete baseline and returns its final mask.
///
/// # Safety
/// Pointers must be valid; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_baseline(cfg: *const SmConfig, out_dir: *const c_char, mask_out: *mut *mut SmMask) -> SmStatus {
    guard(|| {
        let cfg = reference(cfg, "cfg")?;
        let summary = run::run_baseline(&cfg.raw, &PathBuf::from(text(out_dir, "out_dir")?))?;
        store(mask_out, SmMask { mask: summary.mask })
    })
}

/// Evaluates `mask` (or a random mask when null) on the held-out set.
///
/// # Safety
/// `cfg` and `metrics` must be valid; `mask` valid or null.
#[no_mangle]
pub unsafe extern "C" fn sm_evaluate(
    cfg: *const SmConfig,
    mask: *const SmMask,
    out_dir: *const c_char,
    metrics: *mut SmMetrics,
) -> SmStatus {
    guard(|| {
        let cfg = reference(cfg, "cfg")?;
        let out = PathBuf::from(text(out_dir, "out_dir")?);
        if metrics.is_null() {
            return Err(null("metrics"));
        }
        let mut raw = cfg.raw.clone();
        if let Some(m) = mask.as_ref() {
            std::fs::create_dir_all(&out).map_err(|e| Fail(SmStatus::SmIo, e.to_string()))?;
            let path = out.join("input_mask.gldm");
            write_matrix(&path, &Matrix::from_mask(&m.mask))?;
            raw.set("mask", &path.display().to_string())?;
        }
        let summary = run::run_eval(&raw, &out)?;
        let get = |name: &str| summary.history.iter().find(|r| r.metric == name).map_or(f64::NAN, |r| r.value);
        *metrics = SmMetrics {
            nmse_db: get("nmse_db"),
            nmae_db: get("nmae_db"),
            loss: get("loss"),
            false_positives: get("false_positives"),
            false_negatives: get("false_negatives"),
        };
        Ok(())
    })
}

/// Reads a binary GLDM mask file.
///
/// # Safety
/// `path` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_read(path: *const c_char, out: *mut *mut SmMask) -> SmStatus {
    guard(|| {
        let mask = read_matrix(&PathBuf::from(text(path, "path")?))?.to_mask()?;
        store(out, SmMask { mask })
    })
}

/// Builds a mask from `rows * cols` bytes, each 0 or 1.
///
/// # Safety
/// `bits` must hold `rows * cols` readable bytes; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_new(rows: usize, cols: usize, bits: *const u8, out: *mut *mut SmMask) -> SmStatus {
    guard(|| {
        let bits = slice(bits, rows * cols, "bits")?;
        let mask = BinaryMask::new(rows, cols, bits.to_vec())?;
        store(out, SmMask { mask })
    })
}

/// # Safety
/// `mask` must be valid; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_write(mask: *const SmMask, path: *const c_char) -> SmStatus {
    guard(|| {
        let mask = reference(mask, "mask")?;
        write_matrix(&PathBuf::from(text(path, "path")?), &Matrix::from_mask(&mask.mask))?;
        Ok(())
    })
}

/// Grid shape of a mask.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_shape(mask: *const SmMask, rows: *mut usize, cols: *mut usize) -> SmStatus {
    guard(|| {
        let mask = reference(mask, "mask")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        *rows = mask.mask.rows();
        *cols = mask.mask.cols();
        Ok(())
    })
}

/// Copies the row-major bits into `buf`, which needs `rows * cols` bytes.
///
/// # Safety
/// `buf` must be valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_bits(mask: *const SmMask, buf: *mut u8, len: usize) -> SmStatus {
    guard(|| {
        let mask = reference(mask, "mask")?;
        let bits = mask.mask.bits();
        if len < bits.len() {
            return Err(Fail(SmStatus::SmBufferTooSmall, format!("need {} bytes, got {len}", bits.len())));
        }
        slice_mut(buf, len, "buf")?[..bits.len()].copy_from_slice(bits);
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_mask_free(mask: *mut SmMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Freezes `mask` into the configured operator family at `scale`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sm_operator_new(
    cfg: *const SmConfig,
    mask: *const SmMask,
    scale: f64,
    out: *mut *mut SmOperator,
) -> SmStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_raw(&reference(cfg, "cfg")?.raw)?;
        let mask = reference(mask, "mask")?;
        let op = cfg.space()?.realize(&mask.mask, scale)?;
        let measurements = op.apply(&vec![0.0; op.signal_len()])?.len();
        store(out, SmOperator { op, measurements })
    })
}

/// Signal and measurement lengths of an operator.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sm_operator_shape(op: *const SmOperator, n: *mut usize, m: *mut usize) -> SmStatus {
    guard(|| {
        let op = reference(op, "op")?;
        if n.is_null() || m.is_null() {
            return Err(null("n/m"));
        }
        *n = op.op.signal_len();
        *m = op.measurements;
        Ok(())
    })
}

/// `y = Φ x`.
///
/// # Safety
/// `x` must hold `n` doubles and `y` room for `m`, per [`sm_operator_shape`].
#[no_mangle]
pub unsafe extern "C" fn sm_operator_apply(op: *const SmOperator, x: *const f64, n: usize, y: *mut f64, m: usize) -> SmStatus {
    guard(|| {
        let op = reference(op, "op")?;
        let out = op.op.apply(slice(x, n, "x")?)?;
        if m != out.len() {
            return Err(Fail(SmStatus::SmDimension, format!("y has {m} entries, operator gives {}", out.len())));
        }
        slice_mut(y, m, "y")?.copy_from_slice(&out);
        Ok(())
    })
}

/// `x = Φᵀ y`.
///
/// # Safety
/// `y` must hold `m` doubles and `x` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn sm_operator_adjoint(op: *const SmOperator, y: *const f64, m: usize, x: *mut f64, n: usize) -> SmStatus {
    guard(|| {
        let op = reference(op, "op")?;
        let out = op.op.adjoint(slice(y, m, "y")?)?;
        if n != out.len() {
            return Err(Fail(SmStatus::SmDimension, format!("x has {n} entries, operator gives {}", out.len())));
        }
        slice_mut(x, n, "x")?.copy_from_slice(&out);
        Ok(())
    })
}

/// # Safety
/// `op` must come from [`sm_operator_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_operator_free(op: *mut SmOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::RngCore;

use super::artifacts::{
    encode_pgm, load_checkpoint, metrics_csv, read_matrix, save_checkpoint, sha256_hex, write_manifest, write_matrix,
    CheckpointHyper, Matrix,
};
use super::config::{BaselineKind, ExperimentConfig, ExperimentKind, RawConfig};
use crate::baselines::{self, BaselineConfig, Method};
use crate::data::{load_idx_images, take_rows};
use crate::diffgraph::Tensor;
use crate::gumbel::BinaryMask;
use crate::operators::{default_scale_grid, grid_search_scale, superpixel_expand};
use crate::rng::{seeded, streams, StreamState};
use crate::solvers::SolverParams;
use crate::training::{push_metrics, random_mask, train, DataSource, MetricRecord, Problem, ScaleChoice, TrainState};
use crate::{Error, Result};

/// Directory holding the bundled 5 000-image MNIST subset.
pub const BUNDLED_DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data");

/// What a finished run hands back to a sweep.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: Vec<MetricRecord>,
    pub mask: BinaryMask,
}

fn check_image_dims(t: &Tensor, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    if t.cols() != cfg.n {
        return Err(Error::Config(format!(
            "train_images: {} has {} pixels per image, config expects {}",
            path.display(),
            t.cols(),
            cfg.n
        )));
    }
    Ok(())
}

/// Training and test signals for `cfg`.
///
/// Without explicit test images the training file is split with a fixed
/// permutation, so every seed sees the same held-out images.
pub fn load_data(cfg: &ExperimentConfig) -> Result<DataSource> {
    if !cfg.experiment.is_image() {
        return Ok(DataSource::Synthetic {
            spec: cfg.synthetic_spec()?,
            samples_per_epoch: cfg.samples_per_epoch,
            test_samples: cfg.test_samples,
        });
    }
    let train_path = cfg
        .train_images
        .clone()
        .unwrap_or_else(|| Path::new(BUNDLED_DATA).join("mnist5k-images-idx3-ubyte.gz"));
    let all = load_idx_images(&train_path)?;
    check_image_dims(&all, cfg, &train_path)?;
    let (train_rows, test) = match &cfg.test_images {
        Some(p) => {
            let t = load_idx_images(p)?;
            check_image_dims(&t, cfg, p)?;
            let k = cfg.test_samples.min(t.rows());
            ((0..all.rows()).collect::<Vec<_>>(), take_rows(&t, &(0..k).collect::<Vec<_>>()))
        }
        None => {
            if cfg.test_samples >= all.rows() {
                return Err(Error::Config(format!("test_samples: {} leaves no training images", cfg.test_samples)));
            }
            let mut order: Vec<usize> = (0..all.rows()).collect();
            order.shuffle(&mut seeded(0, streams::SPLIT));
            let (test_idx, train_idx) = order.split_at(cfg.test_samples);
            (train_idx.to_vec(), take_rows(&all, test_idx))
        }
    };
    let cap = if cfg.train_samples == 0 { train_rows.len() } else { cfg.train_samples.min(train_rows.len()) };
    Ok(DataSource::Images { train: Rc::new(take_rows(&all, &train_rows[..cap])), test: Rc::new(test) })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_mask_images(dir: &Path, cfg: &ExperimentConfig, mask: &BinaryMask) -> Result<()> {
    let masks = dir.join("masks");
    write_file(&masks.join("mask.pgm"), &encode_pgm(mask.cols(), mask.rows(), mask.bits()))?;
    if !cfg.experiment.is_image() {
        return Ok(());
    }
    let (h, w) = (cfg.height, cfg.width);
    let row = |r: usize| &mask.bits()[r * mask.cols()..(r + 1) * mask.cols()];
    match cfg.experiment {
        ExperimentKind::SinglePixelCirculant => {
            write_file(&masks.join("generator.pgm"), &encode_pgm(w, h, row(0)))?;
            write_file(&masks.join("selected_rows.pgm"), &encode_pgm(w, h, row(1)))?;
        }
        ExperimentKind::SinglePixelSuperpixel => {
            let expanded = superpixel_expand(&mask.to_tensor(), h, w, cfg.superpixel_delta)?;
            for r in 0..mask.rows() {
                let bits: Vec<u8> = expanded.row(r).iter().map(|&v| (v != 0.0) as u8).collect();
                write_file(&masks.join(format!("row_{r:03}.pgm")), &encode_pgm(w, h, &bits))?;
            }
        }
        _ => {
            for r in 0..mask.rows() {
                write_file(&masks.join(format!("row_{r:03}.pgm")), &encode_pgm(w, h, row(r)))?;
            }
        }
    }
    Ok(())
}

fn finish(dir: &Path, raw: &RawConfig, cfg: &ExperimentConfig, command: &str, summary: &RunSummary) -> Result<()> {
    write_file(&dir.join("config.txt"), raw.canonical().as_bytes())?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&summary.history, cfg.seed).as_bytes())?;
    write_matrix(&dir.join("mask.gldm"), &Matrix::from_mask(&summary.mask))?;
    write_mask_images(dir, cfg, &summary.mask)?;
    write_manifest(dir, &manifest_header(raw, cfg, command))
}

fn manifest_header(raw: &RawConfig, cfg: &ExperimentConfig, command: &str) -> Vec<(&'static str, String)> {
    vec![
        ("command", command.to_string()),
        ("experiment", cfg.experiment.to_string()),
        ("config_sha256", sha256_hex(raw.canonical().as_bytes())),
        ("seed", cfg.seed.to_string()),
    ]
}

fn hyper(cfg: &ExperimentConfig) -> CheckpointHyper {
    CheckpointHyper {
        lr_mask: cfg.train.lr_mask,
        lr_theta: cfg.train.lr_theta,
        noise_scale: cfg.train.noise_scale,
        tau: cfg.train.tau,
    }
}

/// Scale for a fixed mask: the configured one, or a grid search on a
/// probe batch.
fn scale_for_mask(problem: &Problem, cfg: &ExperimentConfig, data: &DataSource, mask: &BinaryMask, theta: &SolverParams) -> Result<f64> {
    match &cfg.train.scale {
        ScaleChoice::Fixed(s) => Ok(*s),
        ScaleChoice::Search(grid) => {
            let grid = if grid.is_empty() { default_scale_grid() } else { grid.clone() };
            let mut rng = seeded(cfg.seed, streams::PROBE);
            let probe = data.sample_batch(256, &mut rng);
            let noise = StreamState::capture(&rng);
            grid_search_scale(&grid, data.is_image(), |scale| {
                problem.batch_loss(mask, scale, theta, &probe, &mut noise.restore())
            })
        }
    }
}

/// Trains a mask (and solver parameters), optionally resuming from a
/// checkpoint directory.
pub fn run_train(raw: &RawConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let cfg = ExperimentConfig::from_raw(raw)?;
    let data = load_data(&cfg)?;
    let problem = cfg.problem(false)?;
    let state = match resume {
        Some(dir) => load_checkpoint(dir, hyper(&cfg))?,
        None => {
            let fixed = match (&cfg.mask, cfg.train.learn_mask) {
                (_, true) => None,
                (Some(p), false) => Some(read_matrix(p)?.to_mask()?),
                (None, false) => Some(random_mask(&problem.space, &mut seeded(cfg.seed, streams::INIT))?),
            };
            TrainState::init(&problem, &data, &cfg.train, fixed)?
        }
    };
    let outcome = train(&problem, &data, &cfg.train, state)?;
    let mut history = outcome.history;
    if cfg.eval_iterations > 0 && cfg.eval_iterations != cfg.iterations {
        let eval = cfg.problem(true)?;
        let st = &outcome.state;
        let m = eval.evaluate(&outcome.mask, st.scale, &st.params, &data.test_set(cfg.seed), cfg.seed)?;
        let start = history.len();
        push_metrics(&mut history, st.epoch, &m, None);
        history[start..].iter_mut().for_each(|r| r.split = "eval");
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(out, &outcome.state)?;
    let summary = RunSummary { history, mask: outcome.mask };
    finish(out, raw, &cfg, "train", &summary)?;
    match outcome.aborted {
        Some(msg) => Err(Error::Training(format!("{msg}; artifacts hold the last completed epoch"))),
        None => Ok(summary),
    }
}

/// Evaluates a saved mask (config key `mask`), or a random one.
///
/// Scale and solver parameters come from a checkpoint next to the mask
/// when there is one.
pub fn run_eval(raw: &RawConfig, out: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::from_raw(raw)?;
    let data = load_data(&cfg)?;
    let problem = cfg.problem(true)?;
    let mask = match &cfg.mask {
        Some(p) => read_matrix(p)?.to_mask()?,
        None => random_mask(&problem.space, &mut seeded(cfg.seed, streams::INIT))?,
    };
    if !mask.satisfies(problem.space.partition()) {
        return Err(Error::Structure("mask does not match the configured mask space".into()));
    }
    let checkpoint = cfg.mask.as_ref().and_then(|p| p.parent()).filter(|d| d.join("checkpoint.txt").exists());
    let (scale, params) = match checkpoint {
        Some(dir) => {
            let st = load_checkpoint(dir, hyper(&cfg))?;
            (st.scale, st.params)
        }
        None => {
            let params = SolverParams::init(&problem.solver);
            (scale_for_mask(&problem, &cfg, &data, &mask, &params)?, params)
        }
    };
    let params = fit_params(params, &problem);
    let m = problem.evaluate(&mask, scale, &params, &data.test_set(cfg.seed), cfg.seed)?;
    let mut history = Vec::new();
    push_metrics(&mut history, 0, &m, None);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary = RunSummary { history, mask };
    finish(out, raw, &cfg, "eval", &summary)?;
    Ok(summary)
}

/// Learned per-iteration parameters for a solver run with a different
/// iteration count: extra iterations reuse the last learned values.
fn fit_params(mut p: SolverParams, problem: &Problem) -> SolverParams {
    let t = SolverParams::init(&problem.solver).len();
    if p.is_empty() || p.gamma.len() == t {
        return if p.is_empty() { SolverParams::init(&problem.solver) } else { p };
    }
    let (g, r) = (*p.gamma.last().expect("non-empty"), *p.rho.last().expect("non-empty"));
    p.gamma.resize(t, g);
    p.rho.resize(t, r);
    p
}

/// Mini-batch steps one training epoch takes.
pub fn training_steps_per_epoch(cfg: &ExperimentConfig, data: &DataSource) -> usize {
    let len = match data {
        DataSource::Synthetic { samples_per_epoch, .. } => *samples_per_epoch,
        DataSource::Images { train, .. } => train.rows(),
    };
    len.div_ceil(cfg.train.batch_size)
}

/// Greedy search or simulated annealing with the same step budget as
/// training unless configured otherwise.
pub fn run_baseline(raw: &RawConfig, out: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::from_raw(raw)?;
    let data = load_data(&cfg)?;
    let problem = cfg.problem(false)?;
    let params = SolverParams::init(&problem.solver);
    let start = random_mask(&problem.space, &mut seeded(cfg.seed, streams::INIT))?;
    let scale = scale_for_mask(&problem, &cfg, &data, &start, &params)?;
    let or = |v: usize, default: usize| if v == 0 { default } else { v };
    let bcfg = BaselineConfig {
        method: match cfg.baseline {
            BaselineKind::Greedy => Method::Greedy,
            BaselineKind::Anneal => Method::Anneal(cfg.anneal, cfg.acceptance),
        },
        epochs: or(cfg.baseline_epochs, cfg.train.epochs),
        steps_per_epoch: or(cfg.baseline_steps_per_epoch, training_steps_per_epoch(&cfg, &data)),
        batch_size: or(cfg.baseline_batch_size, cfg.train.batch_size),
        seed: cfg.seed,
    };
    let outcome = baselines::run_baseline(&problem, &data, &bcfg, scale, &params)?;
    let mut history = outcome.history;
    if cfg.eval_iterations > 0 && cfg.eval_iterations != cfg.iterations {
        let eval = cfg.problem(true)?;
        let m = eval.evaluate(&outcome.mask, scale, &fit_params(params, &eval), &data.test_set(cfg.seed), cfg.seed)?;
        let start = history.len();
        push_metrics(&mut history, bcfg.epochs, &m, None);
        history[start..].iter_mut().for_each(|r| r.split = "eval");
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary = RunSummary { history, mask: outcome.mask };
    finish(out, raw, &cfg, "baseline", &summary)?;
    Ok(summary)
}

fn run_command(command: &str, raw: &RawConfig, out: &Path) -> Result<RunSummary> {
    match command {
        "train" => run_train(raw, out, None),
        "eval" => run_eval(raw, out),
        "baseline" => run_baseline(raw, out),
        other => Err(Error::Config(format!("sweep_command: unknown command `{other}`"))),
    }
}

/// Runs `sweep_command` once per value of `sweep_field`.
///
/// Each point writes its own artifacts to `<out>/<field>-<value>/`; the
/// top-level `metrics.csv` groups all points. With `sweep_parallel` the
/// points run concurrently and each gets its own seed drawn from the
/// experiment seed.
pub fn run_sweep(raw: &RawConfig, out: &Path) -> Result<Vec<RunSummary>> {
    let cfg = ExperimentConfig::from_raw(raw)?;
    let field = cfg.sweep_field.clone().ok_or_else(|| Error::Config("sweep_field: required for a sweep".into()))?;
    if cfg.sweep_values.is_empty() {
        return Err(Error::Config("sweep_values: at least one value is required".into()));
    }
    let mut points = Vec::with_capacity(cfg.sweep_values.len());
    let mut split = seeded(cfg.seed, streams::SPLIT);
    for value in &cfg.sweep_values {
        let mut point = raw.clone();
        point.set(&field, value)?;
        point.set("sweep_field", "")?;
        point.set("sweep_values", "")?;
        if cfg.sweep_parallel {
            point.set("seed", &split.next_u64().to_string())?;
        }
        ExperimentConfig::from_raw(&point).map_err(|e| Error::Config(format!("sweep point {field}={value}: {e}")))?;
        points.push((value.clone(), point, out.join(format!("{field}-{value}"))));
    }
    let results: Vec<Result<RunSummary>> = if cfg.sweep_parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = points
                .iter()
                .map(|(_, point, dir)| s.spawn(|| run_command(&cfg.sweep_command, point, dir)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("sweep point panicked".into())))).collect()
        })
    } else {
        points.iter().map(|(_, point, dir)| run_command(&cfg.sweep_command, point, dir)).collect()
    };
    let mut csv = String::from("sweep_field,sweep_value,epoch,split,metric,value,seed\n");
    let mut summaries = Vec::with_capacity(points.len());
    for ((value, point, _), result) in points.iter().zip(results) {
        let summary = result?;
        let seed = point.get("seed");
        for r in &summary.history {
            csv.push_str(&format!("{field},{value},{},{},{},{},{seed}\n", r.epoch, r.split, r.metric, r.value));
        }
        summaries.push(summary);
    }
    write_file(&out.join("config.txt"), raw.canonical().as_bytes())?;
    write_file(&out.join("metrics.csv"), csv.as_bytes())?;
    write_manifest(out, &manifest_header(raw, &cfg, "sweep"))?;
    Ok(summaries)
}

/// Output directory used when none is given.
pub fn default_out(command: &str, raw: &RawConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{command}-seed{}", raw.get("experiment"), raw.get("seed")))
}

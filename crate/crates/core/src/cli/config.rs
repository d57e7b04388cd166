//! Flat `key = value` experiment configs.
//!
//! A config resolves in three layers: the defaults of its `experiment`
//! kind, the file, then command-line overrides. Unknown keys are errors.
//! The resolved key/value map is what gets hashed into the manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{AcceptanceRule, AnnealSchedule};
use crate::data::{Amplitude, SparsityMode, SyntheticSpec};
use crate::operators::{Layout, MaskSpace};
use crate::solvers::{SolverConfig, SolverKind};
use crate::training::{default_loss, LossKind, LossSpec, NoiseFamily, NoiseModel, Problem, Reduction, ScaleChoice, TrainConfig};
use crate::transforms::{Transform, TransformKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    SinglePixel,
    SinglePixelCirculant,
    SinglePixelSuperpixel,
    Expander,
    GroupTesting,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SinglePixel => "single_pixel",
            ExperimentKind::SinglePixelCirculant => "single_pixel_circulant",
            ExperimentKind::SinglePixelSuperpixel => "single_pixel_superpixel",
            ExperimentKind::Expander => "expander",
            ExperimentKind::GroupTesting => "group_testing",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(
            self,
            ExperimentKind::SinglePixel | ExperimentKind::SinglePixelCirculant | ExperimentKind::SinglePixelSuperpixel
        )
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ExperimentKind::SinglePixel,
            ExperimentKind::SinglePixelCirculant,
            ExperimentKind::SinglePixelSuperpixel,
            ExperimentKind::Expander,
            ExperimentKind::GroupTesting,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("experiment: unknown kind `{s}`")))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every accepted key with its kind-independent default.
const BASE: &[(&str, &str)] = &[
    ("experiment", "single_pixel"),
    ("m", "50"),
    ("n", "784"),
    ("d", "32"),
    ("height", "28"),
    ("width", "28"),
    ("layout", "rows"),
    ("superpixel_delta", "1"),
    ("s", "50"),
    ("iterations", "20"),
    // 0: same as `iterations`
    ("eval_iterations", "0"),
    ("solver", "iht"),
    ("transform", "bior2.2-level1"),
    ("lambda", "0.01"),
    ("gamma", "1"),
    ("nnlad_sigma", "0.1"),
    ("nnlad_tau", "0.6"),
    ("loss", "auto"),
    ("loss_average", "auto"),
    ("loss_reduction", "element"),
    ("noise", "gaussian"),
    ("snr_db", "40"),
    ("sparsity_mode", "bernoulli"),
    ("amplitude", "gaussian"),
    ("samples_per_epoch", "5000"),
    ("test_samples", "1000"),
    // 0: every training image
    ("train_samples", "0"),
    ("train_images", ""),
    ("test_images", ""),
    ("epochs", "5"),
    ("batch_size", "50"),
    ("lr_mask", "0.02"),
    ("lr_theta", "0.001"),
    ("learn_mask", "true"),
    ("learn_theta", "true"),
    ("init_scale", "0.001"),
    ("gumbel_noise_scale", "0.001"),
    ("gumbel_tau", "1"),
    ("scale", "search"),
    ("threshold", "0.01"),
    ("baseline", "anneal"),
    ("anneal_tau0", "0.0012"),
    ("anneal_decay", "0.9997"),
    ("acceptance", "metropolis"),
    // 0: match the training run
    ("baseline_epochs", "0"),
    ("baseline_steps_per_epoch", "0"),
    ("baseline_batch_size", "0"),
    ("seed", "0"),
    ("mask", ""),
    ("sweep_field", ""),
    ("sweep_values", ""),
    ("sweep_command", "train"),
    ("sweep_parallel", "false"),
];

fn kind_defaults(kind: ExperimentKind) -> &'static [(&'static str, &'static str)] {
    match kind {
        ExperimentKind::SinglePixel => &[],
        ExperimentKind::SinglePixelCirculant => &[],
        ExperimentKind::SinglePixelSuperpixel => &[("d", "4")],
        ExperimentKind::Expander => &[
            ("m", "40"),
            ("n", "128"),
            ("d", "4"),
            ("layout", "columns"),
            ("s", "8"),
            ("solver", "e_iht"),
            ("transform", "identity"),
            ("noise", "student_t_df1"),
            ("lambda", "0.1"),
            ("lr_theta", "0.01"),
            ("epochs", "20"),
            ("anneal_tau0", "0.003"),
            ("anneal_decay", "0.9998"),
        ],
        ExperimentKind::GroupTesting => &[
            ("m", "248"),
            ("n", "961"),
            ("d", "31"),
            ("s", "80"),
            ("solver", "nnlad"),
            ("iterations", "200"),
            ("eval_iterations", "1000"),
            ("transform", "identity"),
            ("noise", "student_t_df1"),
            ("sparsity_mode", "exact"),
            ("amplitude", "beta28"),
            ("anneal_tau0", "0.003"),
            ("anneal_decay", "0.9998"),
        ],
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `key=value` as given to `--override`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
}

/// Resolved key/value map, before typing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig(BTreeMap<String, String>);

impl RawConfig {
    /// Layers `pairs` over the defaults of the experiment kind they name.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let kind: ExperimentKind = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "experiment")
            .map(|(_, v)| v.parse())
            .transpose()?
            .ok_or_else(|| Error::Config("experiment: required key is missing".into()))?;
        let mut map: BTreeMap<String, String> = BASE.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in kind_defaults(kind) {
            map.insert(k.to_string(), v.to_string());
        }
        let mut raw = RawConfig(map);
        for (k, v) in pairs {
            raw.set(k, v)?;
        }
        Ok(raw)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        Self::resolve(&pairs)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.0.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("{key}: unknown key"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn canonical(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn field<T: FromStr>(raw: &RawConfig, key: &str) -> Result<T> {
    let v = raw.get(key);
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn field_with<T>(raw: &RawConfig, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    f(raw.get(key)).map_err(|e| match e {
        Error::Config(msg) if msg.starts_with(key) => Error::Config(msg),
        other => Error::Config(format!("{key}: {other}")),
    })
}

fn optional_path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Greedy,
    Anneal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub superpixel_delta: usize,
    pub s: usize,
    pub iterations: usize,
    pub eval_iterations: usize,
    pub solver: SolverKind,
    pub transform: TransformKind,
    pub lambda: f64,
    pub gamma: f64,
    pub nnlad_sigma: f64,
    pub nnlad_tau: f64,
    pub loss: LossSpec,
    pub noise: NoiseModel,
    pub sparsity_mode: SparsityMode,
    pub amplitude: Amplitude,
    pub samples_per_epoch: usize,
    pub test_samples: usize,
    pub train_samples: usize,
    pub train_images: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub train: TrainConfig,
    pub threshold: f64,
    pub baseline: BaselineKind,
    pub anneal: AnnealSchedule,
    pub acceptance: AcceptanceRule,
    pub baseline_epochs: usize,
    pub baseline_steps_per_epoch: usize,
    pub baseline_batch_size: usize,
    pub seed: u64,
    pub mask: Option<PathBuf>,
    pub sweep_field: Option<String>,
    pub sweep_values: Vec<String>,
    pub sweep_command: String,
    pub sweep_parallel: bool,
}

impl ExperimentConfig {
    /// Types and validates every field of `raw`.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let experiment: ExperimentKind = field_with(raw, "experiment", str::parse)?;
        let solver: SolverKind = field_with(raw, "solver", str::parse)?;
        let (height, width): (usize, usize) = (field(raw, "height")?, field(raw, "width")?);
        let n = if experiment.is_image() { height * width } else { field(raw, "n")? };
        if experiment.is_image() && raw.get("n") != n.to_string() {
            return Err(Error::Config(format!("n: image experiments need n = height·width = {n}")));
        }
        let mut loss = default_loss(solver);
        match raw.get("loss") {
            "auto" => {}
            "l2" => loss.kind = LossKind::SquaredL2,
            "l1" => loss.kind = LossKind::L1,
            other => return Err(Error::Config(format!("loss: expected auto, l2 or l1, got `{other}`"))),
        }
        match raw.get("loss_average") {
            "auto" => {}
            _ => loss.average_over_iterations = field(raw, "loss_average")?,
        }
        loss.reduction = field_with(raw, "loss_reduction", str::parse::<Reduction>)?;
        let snr_db = match raw.get("snr_db") {
            "inf" => f64::INFINITY,
            _ => field(raw, "snr_db")?,
        };
        let noise = field_with(raw, "noise", |v| NoiseModel::new(v.parse::<NoiseFamily>()?, snr_db))?;
        let sparsity_mode = match raw.get("sparsity_mode") {
            "bernoulli" => SparsityMode::Bernoulli,
            "exact" => SparsityMode::Exact,
            other => return Err(Error::Config(format!("sparsity_mode: expected bernoulli or exact, got `{other}`"))),
        };
        let amplitude = match raw.get("amplitude") {
            "gaussian" => Amplitude::Gaussian,
            "beta28" => Amplitude::Beta28,
            other => return Err(Error::Config(format!("amplitude: expected gaussian or beta28, got `{other}`"))),
        };
        let scale = match raw.get("scale") {
            "search" => ScaleChoice::Search(Vec::new()),
            _ => ScaleChoice::Fixed(field(raw, "scale")?),
        };
        let seed = field(raw, "seed")?;
        let train = TrainConfig {
            epochs: field(raw, "epochs")?,
            batch_size: field(raw, "batch_size")?,
            lr_mask: field(raw, "lr_mask")?,
            lr_theta: field(raw, "lr_theta")?,
            learn_mask: field(raw, "learn_mask")?,
            learn_theta: field(raw, "learn_theta")?,
            init_scale: field(raw, "init_scale")?,
            noise_scale: field(raw, "gumbel_noise_scale")?,
            tau: field(raw, "gumbel_tau")?,
            scale,
            seed,
        };
        let baseline = match raw.get("baseline") {
            "greedy" => BaselineKind::Greedy,
            "anneal" => BaselineKind::Anneal,
            other => return Err(Error::Config(format!("baseline: expected greedy or anneal, got `{other}`"))),
        };
        let anneal = field_with(raw, "anneal_tau0", |_| {
            AnnealSchedule::new(field(raw, "anneal_tau0")?, field(raw, "anneal_decay")?)
        })?;
        let sweep_field = Some(raw.get("sweep_field").to_string()).filter(|s| !s.is_empty());
        let sweep_values: Vec<String> =
            raw.get("sweep_values").split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        let cfg = Self {
            experiment,
            m: field(raw, "m")?,
            n,
            d: field(raw, "d")?,
            height,
            width,
            layout: field_with(raw, "layout", str::parse)?,
            superpixel_delta: field(raw, "superpixel_delta")?,
            s: field(raw, "s")?,
            iterations: field(raw, "iterations")?,
            eval_iterations: field(raw, "eval_iterations")?,
            solver,
            transform: field_with(raw, "transform", str::parse)?,
            lambda: field(raw, "lambda")?,
            gamma: field(raw, "gamma")?,
            nnlad_sigma: field(raw, "nnlad_sigma")?,
            nnlad_tau: field(raw, "nnlad_tau")?,
            loss,
            noise,
            sparsity_mode,
            amplitude,
            samples_per_epoch: field(raw, "samples_per_epoch")?,
            test_samples: field(raw, "test_samples")?,
            train_samples: field(raw, "train_samples")?,
            train_images: optional_path(raw, "train_images"),
            test_images: optional_path(raw, "test_images"),
            train,
            threshold: field(raw, "threshold")?,
            baseline,
            anneal,
            acceptance: field_with(raw, "acceptance", str::parse)?,
            baseline_epochs: field(raw, "baseline_epochs")?,
            baseline_steps_per_epoch: field(raw, "baseline_steps_per_epoch")?,
            baseline_batch_size: field(raw, "baseline_batch_size")?,
            seed,
            mask: optional_path(raw, "mask"),
            sweep_field,
            sweep_values,
            sweep_command: raw.get("sweep_command").to_string(),
            sweep_parallel: field(raw, "sweep_parallel")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let ctx = |key: &'static str| move |e: Error| Error::Config(format!("{key}: {e}"));
        self.space().map_err(ctx("d"))?;
        self.transform().map_err(ctx("transform"))?;
        self.solver_config(self.iterations).validate(self.n).map_err(ctx("solver"))?;
        self.train.validate().map_err(ctx("train"))?;
        if self.train.epochs > 0 && !self.experiment.is_image() && self.samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch: must be positive".into()));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples: must be positive".into()));
        }
        if !self.experiment.is_image() {
            SyntheticSpec::new(self.n, self.s, self.sparsity_mode, self.amplitude).map_err(ctx("s"))?;
        }
        if self.solver.uses_median() && !self.transform.eq(&TransformKind::Identity) {
            return Err(Error::Config(format!("transform: {} needs the identity transform", self.solver)));
        }
        if !matches!(self.sweep_command.as_str(), "train" | "eval" | "baseline") {
            return Err(Error::Config(format!("sweep_command: expected train, eval or baseline, got `{}`", self.sweep_command)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config("threshold: must be non-negative".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> Result<MaskSpace> {
        match self.experiment {
            ExperimentKind::SinglePixelCirculant => MaskSpace::circulant(self.m, self.n, self.d),
            ExperimentKind::SinglePixelSuperpixel => {
                MaskSpace::superpixel(self.m, self.height, self.width, self.d, self.superpixel_delta)
            }
            _ => MaskSpace::dense(self.m, self.n, self.d, self.layout),
        }
    }

    pub fn transform(&self) -> Result<Transform> {
        if self.experiment.is_image() {
            Transform::new(self.transform, self.height, self.width)
        } else if self.transform == TransformKind::Identity {
            Ok(Transform::identity(self.n))
        } else {
            Err(Error::Config("transform: wavelets need an image experiment".into()))
        }
    }

    pub fn solver_config(&self, iterations: usize) -> SolverConfig {
        let mut s = SolverConfig::new(self.solver, iterations, self.s);
        s.gamma = self.gamma;
        s.lambda = self.lambda;
        s.sigma = self.nnlad_sigma;
        s.tau_nnlad = self.nnlad_tau;
        s.average_loss = self.loss.average_over_iterations;
        s
    }

    /// The pipeline used for training (`eval = false`) or final evaluation.
    pub fn problem(&self, eval: bool) -> Result<Problem> {
        let iterations = if eval && self.eval_iterations > 0 { self.eval_iterations } else { self.iterations };
        Ok(Problem {
            space: self.space()?,
            transform: self.transform()?,
            solver: self.solver_config(iterations),
            noise: self.noise,
            loss: self.loss,
            detection_threshold: self.threshold,
        })
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        SyntheticSpec::new(self.n, self.s, self.sparsity_mode, self.amplitude)
    }
}

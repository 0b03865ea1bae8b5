//! Flat `key = value` pipeline configuration.
//!
//! Lines starting with `#` are comments. Unknown keys, repeated keys and
//! malformed values are configuration errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{EvalOptions, PairOptions};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::net::QualityNetConfig;
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub frames: usize,
    pub conv_widths: Vec<usize>,
    pub head_width: usize,
    pub kernel: usize,
    pub width_multiplier: f64,
    pub levels: u8,
    pub train_sources: usize,
    pub val_sources: usize,
    pub test_sources: usize,
    pub pairs_per_source: usize,
    pub cross_content: bool,
    pub eval_sources: usize,
    pub eval_frame_height: usize,
    pub eval_frame_width: usize,
    pub eval_jitter: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub teacher_lr: f64,
    pub teacher_epochs: usize,
    pub lambda: f64,
    pub sparse_lr: f64,
    pub sparse_epochs: usize,
    pub orthant_from: Option<usize>,
    pub sparse_from_scratch: bool,
    pub alpha: f64,
    pub distill_lr: f64,
    pub distill_epochs: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            channels: 1,
            patch_height: 16,
            patch_width: 16,
            frames: 1,
            conv_widths: vec![32, 64, 128],
            head_width: 64,
            kernel: 3,
            width_multiplier: 1.0,
            levels: 6,
            train_sources: 500,
            val_sources: 50,
            test_sources: 50,
            pairs_per_source: 20,
            cross_content: false,
            eval_sources: 20,
            eval_frame_height: 32,
            eval_frame_width: 32,
            eval_jitter: 0.2,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            teacher_lr: 2e-3,
            teacher_epochs: 10,
            lambda: 0.1,
            sparse_lr: 1e-3,
            sparse_epochs: 30,
            orthant_from: None,
            sparse_from_scratch: false,
            alpha: 0.1,
            distill_lr: 1e-3,
            distill_epochs: 30,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

/// Every key with its documentation, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed for corpus generation, initialization and batch order"),
    ("channels", "planes per frame (1 = grayscale)"),
    ("patch_height", "training patch height"),
    ("patch_width", "training patch width"),
    ("frames", "consecutive frames stacked into the channel axis"),
    ("conv_widths", "comma-separated output channels of the conv blocks"),
    ("head_width", "hidden units of the dense head"),
    ("kernel", "odd conv kernel size"),
    ("width_multiplier", "scale applied to conv_widths and head_width"),
    ("levels", "distortion ladder length S"),
    ("train_sources", "source textures in the training split"),
    ("val_sources", "source textures in the validation split"),
    ("test_sources", "source textures in the held-out test split"),
    ("pairs_per_source", "ranked pair instances per source texture"),
    ("cross_content", "pair different sources (levels then differ by at least 2)"),
    ("eval_sources", "sequences per evaluation dataset"),
    ("eval_frame_height", "evaluation frame height (tiled into patches)"),
    ("eval_frame_width", "evaluation frame width (tiled into patches)"),
    ("eval_jitter", "half-width of the uniform pseudo-MOS jitter"),
    ("batch_size", "instances per optimizer step"),
    ("beta1", "AdaMax first-moment decay"),
    ("beta2", "AdaMax infinity-norm decay"),
    ("teacher_lr", "learning rate of dense teacher training"),
    ("teacher_epochs", "epochs of dense teacher training"),
    ("lambda", "l1 weight of the sparsity phase"),
    ("sparse_lr", "learning rate (and proximal step) of the sparsity phase"),
    ("sparse_epochs", "epochs of the sparsity phase"),
    ("orthant_from", "first orthant epoch of the sparsity phase (empty = half)"),
    ("sparse_from_scratch", "sparsify a fresh initialization instead of the teacher"),
    ("alpha", "weight of the ground-truth loss during distillation"),
    ("distill_lr", "learning rate of distillation"),
    ("distill_epochs", "epochs of distillation"),
    ("data_dir", "corpus directory"),
    ("run_dir", "checkpoint and report directory"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "patch_height" => self.patch_height = parse(key, v)?,
            "patch_width" => self.patch_width = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "conv_widths" => {
                self.conv_widths = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "head_width" => self.head_width = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "width_multiplier" => self.width_multiplier = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "train_sources" => self.train_sources = parse(key, v)?,
            "val_sources" => self.val_sources = parse(key, v)?,
            "test_sources" => self.test_sources = parse(key, v)?,
            "pairs_per_source" => self.pairs_per_source = parse(key, v)?,
            "cross_content" => self.cross_content = parse_bool(key, v)?,
            "eval_sources" => self.eval_sources = parse(key, v)?,
            "eval_frame_height" => self.eval_frame_height = parse(key, v)?,
            "eval_frame_width" => self.eval_frame_width = parse(key, v)?,
            "eval_jitter" => self.eval_jitter = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "sparse_lr" => self.sparse_lr = parse(key, v)?,
            "sparse_epochs" => self.sparse_epochs = parse(key, v)?,
            "orthant_from" => {
                self.orthant_from = if v.is_empty() { None } else { Some(parse(key, v)?) }
            }
            "sparse_from_scratch" => self.sparse_from_scratch = parse_bool(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "distill_lr" => self.distill_lr = parse(key, v)?,
            "distill_epochs" => self.distill_epochs = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "channels" => self.channels.to_string(),
            "patch_height" => self.patch_height.to_string(),
            "patch_width" => self.patch_width.to_string(),
            "frames" => self.frames.to_string(),
            "conv_widths" => join(&self.conv_widths),
            "head_width" => self.head_width.to_string(),
            "kernel" => self.kernel.to_string(),
            "width_multiplier" => self.width_multiplier.to_string(),
            "levels" => self.levels.to_string(),
            "train_sources" => self.train_sources.to_string(),
            "val_sources" => self.val_sources.to_string(),
            "test_sources" => self.test_sources.to_string(),
            "pairs_per_source" => self.pairs_per_source.to_string(),
            "cross_content" => self.cross_content.to_string(),
            "eval_sources" => self.eval_sources.to_string(),
            "eval_frame_height" => self.eval_frame_height.to_string(),
            "eval_frame_width" => self.eval_frame_width.to_string(),
            "eval_jitter" => self.eval_jitter.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "teacher_lr" => self.teacher_lr.to_string(),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "lambda" => self.lambda.to_string(),
            "sparse_lr" => self.sparse_lr.to_string(),
            "sparse_epochs" => self.sparse_epochs.to_string(),
            "orthant_from" => self.orthant_from.map(|e| e.to_string()).unwrap_or_default(),
            "sparse_from_scratch" => self.sparse_from_scratch.to_string(),
            "alpha" => self.alpha.to_string(),
            "distill_lr" => self.distill_lr.to_string(),
            "distill_epochs" => self.distill_epochs.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: key {k} repeated", no + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key with its documentation comment; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().spec()?;
        self.teacher_optimizer().validate()?;
        self.sparse_optimizer().validate()?;
        self.distill_config().optimizer.validate()?;
        if self.levels < 2 {
            return Err(Error::config("levels must be at least 2"));
        }
        if self.train_sources == 0 || self.pairs_per_source == 0 {
            return Err(Error::config("the training split needs sources and pairs"));
        }
        if self.eval_frame_height < self.patch_height || self.eval_frame_width < self.patch_width {
            return Err(Error::config("evaluation frames must be at least one patch"));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::config("alpha must be non-negative"));
        }
        Ok(())
    }

    pub fn frame_geometry(&self) -> Geometry {
        Geometry::new(self.channels, self.patch_height, self.patch_width)
    }

    pub fn eval_geometry(&self) -> Geometry {
        Geometry::new(self.channels, self.eval_frame_height, self.eval_frame_width)
    }

    pub fn net_config(&self) -> QualityNetConfig {
        QualityNetConfig {
            patch: self.frame_geometry(),
            frames: self.frames,
            conv_widths: self.conv_widths.clone(),
            head_width: self.head_width,
            kernel: self.kernel,
            width_multiplier: self.width_multiplier,
            seed: self.seed,
        }
    }

    pub fn pair_options(&self) -> PairOptions {
        PairOptions {
            pairs_per_source: self.pairs_per_source,
            levels: self.levels,
            cross_content: self.cross_content,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            levels: self.levels,
            frames: self.frames,
            jitter: self.eval_jitter,
        }
    }

    fn optimizer(&self, lr: f64, epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            lambda: 0.0,
            epochs,
            batch_size: self.batch_size,
            orthant_from: None,
            seed: self.seed,
        }
    }

    pub fn teacher_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.teacher_lr, self.teacher_epochs)
    }

    pub fn sparse_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lambda: self.lambda,
            orthant_from: self.orthant_from,
            ..self.optimizer(self.sparse_lr, self.sparse_epochs)
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            optimizer: self.optimizer(self.distill_lr, self.distill_epochs),
        }
    }
}

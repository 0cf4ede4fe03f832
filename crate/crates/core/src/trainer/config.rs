use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::episodes::{
    image_directory_source, synthetic_cluster_source, EpisodeSpec, ImageDirectory, ImageLayout, SyntheticClusters,
    TaskSource,
};
use crate::error::{Error, Result};
use crate::objective::LossWeights;
use crate::srwm::{Activation, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32 or f64)"))),
        }
    }
}

/// Which loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Three-term loss with the configured weights.
    Bootstrapped,
    /// Support-then-query cross-entropy, no teacher branch at all.
    Plain,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Bootstrapped => "bootstrapped",
            Objective::Plain => "plain",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrapped" => Ok(Objective::Bootstrapped),
            "plain" => Ok(Objective::Plain),
            other => Err(Error::Config(format!("unknown objective `{other}` (bootstrapped or plain)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Images,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Images => "images",
        })
    }
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataKind::Synthetic),
            "images" => Ok(DataKind::Images),
            other => Err(Error::Config(format!("unknown data kind `{other}` (synthetic or images)"))),
        }
    }
}

/// Where episodes come from. Classes are split in order into train, val
/// and test pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub seed: u64,
    pub dim: usize,
    pub spread: f64,
    pub examples_per_class: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub image_root: PathBuf,
    pub manifest: PathBuf,
    /// Patch side in pixels; 0 flattens whole images.
    pub patch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            seed: 0,
            dim: 32,
            spread: 0.5,
            examples_per_class: 600,
            train_classes: 200,
            val_classes: 0,
            test_classes: 50,
            image_root: PathBuf::new(),
            manifest: PathBuf::new(),
            patch: 0,
        }
    }
}

/// Disjoint class pools plus what the model needs to know about inputs.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: TaskSource,
    pub val: TaskSource,
    pub test: TaskSource,
    pub input_dim: usize,
    pub patch_dim: usize,
    pub clusters: Option<Arc<SyntheticClusters>>,
}

impl DataConfig {
    pub fn build(&self) -> Result<DataSplits> {
        let classes = self.train_classes + self.val_classes + self.test_classes;
        match self.kind {
            DataKind::Synthetic => {
                let (src, clusters) =
                    synthetic_cluster_source(classes, self.dim, self.spread, self.examples_per_class, self.seed)?;
                let (train, val, test) = src.splits(self.train_classes, self.val_classes, self.test_classes)?;
                Ok(DataSplits {
                    train,
                    val,
                    test,
                    input_dim: self.dim,
                    patch_dim: 0,
                    clusters: Some(clusters),
                })
            }
            DataKind::Images => {
                let layout = if self.patch > 0 {
                    ImageLayout::Patches(self.patch)
                } else {
                    ImageLayout::Flatten
                };
                let manifest = if self.manifest.is_absolute() {
                    self.manifest.clone()
                } else {
                    self.image_root.join(&self.manifest)
                };
                let dir = ImageDirectory::open(&self.image_root, &manifest, layout)?;
                let channels = match dir.image_shape() {
                    [_, _, c] => *c,
                    _ => 1,
                };
                let patch_dim = self.patch * self.patch * channels;
                let src = image_directory_source(&self.image_root, &manifest, layout)?;
                let input_dim = src.input_dim();
                let (train, val, test) = src.splits(self.train_classes, self.val_classes, self.test_classes)?;
                Ok(DataSplits {
                    train,
                    val,
                    test,
                    input_dim,
                    patch_dim,
                    clusters: None,
                })
            }
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_extra: usize,
    pub queries: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub objective: Objective,
    pub seed: u64,
    pub eval_interval: u64,
    pub clip_norm: f64,
    pub delayed_labels: bool,
    pub max_unroll: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub activation: Activation,
    pub phi_on_input: bool,
    pub merge_projection: bool,
    pub beta_init: f64,
    pub precision: Precision,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset("desk").expect("known preset")
    }
}

const ARCH_KEYS: &[&str] = &[
    "n_way",
    "blocks",
    "d_model",
    "heads",
    "d_ff",
    "activation",
    "phi_on_input",
    "merge_projection",
    "precision",
    "data.kind",
    "data.dim",
    "data.patch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub const PRESETS: &'static [&'static str] = &["micro", "desk", "paper"];

    /// `micro` is the gradient-check size, `desk` a laptop-scale run and
    /// `paper` the full architecture (3 blocks, d_model 256, 16 heads,
    /// d_ff 2048, batch 16).
    pub fn preset(name: &str) -> Result<Self> {
        let desk = TrainConfig {
            n_way: 5,
            k_shot: 5,
            k_extra: 0,
            queries: 1,
            batch_size: 16,
            steps: 10_000,
            peak_lr: 1e-3,
            warmup: 500,
            beta1: 1.0,
            beta2: 0.0,
            beta3: 0.0,
            objective: Objective::Bootstrapped,
            seed: 0,
            eval_interval: 1000,
            clip_norm: 1.0,
            delayed_labels: false,
            max_unroll: 512,
            blocks: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            activation: Activation::Relu,
            phi_on_input: false,
            merge_projection: false,
            beta_init: -3.0,
            precision: Precision::F64,
            data: DataConfig::default(),
        };
        match name {
            "desk" => Ok(desk),
            "micro" => Ok(TrainConfig {
                n_way: 3,
                k_shot: 2,
                k_extra: 1,
                queries: 1,
                batch_size: 1,
                steps: 100,
                warmup: 10,
                beta1: 1.0,
                beta2: 1.0,
                beta3: 1.0,
                eval_interval: 50,
                blocks: 1,
                d_model: 16,
                heads: 2,
                d_ff: 16,
                activation: Activation::Softplus,
                data: DataConfig {
                    dim: 8,
                    examples_per_class: 40,
                    train_classes: 20,
                    test_classes: 10,
                    ..DataConfig::default()
                },
                ..desk
            }),
            "paper" => Ok(TrainConfig {
                blocks: 3,
                d_model: 256,
                heads: 16,
                d_ff: 2048,
                k_extra: 5,
                beta2: 1.0,
                beta3: 1.0,
                steps: 100_000,
                warmup: 2000,
                ..desk
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n_way" => self.n_way = parse(key, v)?,
            "k_shot" => self.k_shot = parse(key, v)?,
            "k_extra" => self.k_extra = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "beta3" => self.beta3 = parse(key, v)?,
            "objective" => self.objective = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "delayed_labels" => self.delayed_labels = parse(key, v)?,
            "max_unroll" => self.max_unroll = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "activation" => self.activation = v.parse()?,
            "phi_on_input" => self.phi_on_input = parse(key, v)?,
            "merge_projection" => self.merge_projection = parse(key, v)?,
            "beta_init" => self.beta_init = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "data.kind" => self.data.kind = v.parse()?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.dim" => self.data.dim = parse(key, v)?,
            "data.spread" => self.data.spread = parse(key, v)?,
            "data.examples_per_class" => self.data.examples_per_class = parse(key, v)?,
            "data.train_classes" => self.data.train_classes = parse(key, v)?,
            "data.val_classes" => self.data.val_classes = parse(key, v)?,
            "data.test_classes" => self.data.test_classes = parse(key, v)?,
            "data.image_root" => self.data.image_root = PathBuf::from(v),
            "data.manifest" => self.data.manifest = PathBuf::from(v),
            "data.patch" => self.data.patch = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        vec![
            ("n_way", self.n_way.to_string()),
            ("k_shot", self.k_shot.to_string()),
            ("k_extra", self.k_extra.to_string()),
            ("queries", self.queries.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("beta3", self.beta3.to_string()),
            ("objective", self.objective.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("delayed_labels", self.delayed_labels.to_string()),
            ("max_unroll", self.max_unroll.to_string()),
            ("blocks", self.blocks.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("activation", self.activation.to_string()),
            ("phi_on_input", self.phi_on_input.to_string()),
            ("merge_projection", self.merge_projection.to_string()),
            ("beta_init", self.beta_init.to_string()),
            ("precision", self.precision.to_string()),
            ("data.kind", d.kind.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.dim", d.dim.to_string()),
            ("data.spread", d.spread.to_string()),
            ("data.examples_per_class", d.examples_per_class.to_string()),
            ("data.train_classes", d.train_classes.to_string()),
            ("data.val_classes", d.val_classes.to_string()),
            ("data.test_classes", d.test_classes.to_string()),
            ("data.image_root", d.image_root.display().to_string()),
            ("data.manifest", d.manifest.display().to_string()),
            ("data.patch", d.patch.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", path.display(), n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: TrainConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_text(path, &text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.n_way, self.k_shot, self.k_extra, self.queries)
    }

    /// Longest sequence one rollout feeds through a single state chain.
    pub fn unroll(&self) -> usize {
        self.n_way * (self.k_shot + self.k_extra) + 1
    }

    pub fn model_config(&self, input_dim: usize, patch_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            n_way: self.n_way,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            blocks: self.blocks,
            activation: self.activation,
            phi_on_input: self.phi_on_input,
            merge_projection: self.merge_projection,
            patch_dim,
            beta_init: self.beta_init,
            ..ModelConfig::default()
        }
    }

    /// Checks every field and reports all offending ones at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.k_shot == 0 || self.queries == 0 {
            problems.push("k_shot and queries must be positive".into());
        }
        if self.warmup > self.steps {
            problems.push(format!("warmup ({}) exceeds steps ({})", self.warmup, self.steps));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            problems.push(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.clip_norm >= 0.0) {
            problems.push("clip_norm must be >= 0 (0 disables clipping)".into());
        }
        if self.objective == Objective::Bootstrapped {
            if let Err(e) = self.weights().validate() {
                problems.push(e.to_string());
            } else if self.weights().needs_teacher() && self.k_extra == 0 {
                problems.push("beta2 or beta3 > 0 needs k_extra > 0".into());
            }
        }
        if self.unroll() > self.max_unroll {
            problems.push(format!(
                "episodes unroll {} steps, above max_unroll {}",
                self.unroll(),
                self.max_unroll
            ));
        }
        if let Err(Error::Config(m)) = self.model_config(self.data.dim.max(1), 0).validate() {
            problems.push(m);
        }
        if self.data.kind == DataKind::Synthetic && !(self.data.spread > 0.0) {
            problems.push("data.spread must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Names every architecture setting where `self` and `other` disagree.
    pub fn check_same_architecture(&self, other: &TrainConfig) -> Result<()> {
        let a = self.entries();
        let b = other.entries();
        let diffs: Vec<String> = a
            .iter()
            .zip(&b)
            .filter(|((k, va), (_, vb))| ARCH_KEYS.contains(k) && va != vb)
            .map(|((k, va), (_, vb))| format!("{k}: checkpoint has {va}, config has {vb}"))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(diffs.join("; ")))
        }
    }
}

//! Flat key = value experiment configuration (TOML syntax, no tables).
//!
//! Every key is optional and falls back to the defaults of [`TtaConfig`],
//! [`ArchConfig`], [`TrainConfig`] and [`SyntheticBenchmarkSpec`]. Parsing
//! collects every problem before reporting, so one run lists all mistakes.
//!
//! | key | type | meaning |
//! |-----|------|---------|
//! | `iterations`, `lr`, `batch_size`, `lambda`, `p`, `tau`, `groups` (or `G`), `crop` | number | adaptation hyperparameters |
//! | `distortion_mode` | `"best"`, `"all"`, `"single:<kind>"` | kind selection for the rank term |
//! | `seeds` | array of ints | adaptation seeds |
//! | `objective` | `"combined"`, `"rank_only"`, `"gc_only"`, `"rotation"` | objective for `tta` |
//! | `positive_in_denominator`, `resample_triplets`, `enabled` | bool | adaptation switches |
//! | `adapt_bn_mode`, `predict_bn_mode`, `source_bn_mode` | `"eval"`, `"batch_stats"` | BN statistics per phase |
//! | `beta1`, `beta2`, `adam_eps` | number | optimizer constants |
//! | `widths`, `arch_seed`, `head_seed`, `proj_dim`, `proj_hidden`, `regressor_hidden` | model shape |
//! | `train_epochs`, `train_batch_size`, `train_lr`, `rotation_epochs`, `train_seed` | source training |
//! | `bench_train`, `bench_test`, `bench_size`, `bench_levels`, `bench_seed` | benchmark size |
//! | `source_family`, `target_family` | arrays of kind names | distortion shift |
//! | `checkpoint` | path | trained source model; otherwise trained from scratch |
//! | `train_from_scratch` | bool | ignore `checkpoint` |
//! | `manifest` | path | evaluate on a CSV manifest instead of the benchmark |
//!
//! Relative paths resolve against the config file's directory.

use crate::adaptation::{DistortionMode, TtaConfig};
use crate::distortions::DistortionKind;
use crate::eval::synth::SyntheticBenchmarkSpec;
use crate::losses::Objective;
use crate::model::{ArchConfig, TrainConfig};
use crate::tensor::BnMode;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use toml::Value;

/// Environment variable that shifts every seed in the configuration.
pub const SEED_ENV: &str = "TTA_IQA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tta: TtaConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub bench: SyntheticBenchmarkSpec,
    pub bench_seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub train_from_scratch: bool,
    pub manifest: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tta: TtaConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            bench: SyntheticBenchmarkSpec::default(),
            bench_seed: 2024,
            checkpoint: None,
            train_from_scratch: false,
            manifest: None,
        }
    }
}

struct Reader<'a> {
    errors: &'a mut Vec<String>,
}

impl Reader<'_> {
    fn float(&mut self, k: &str, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => self.bad(k, "a number", v),
        }
    }

    fn uint(&mut self, k: &str, v: &Value) -> Option<u64> {
        match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => self.bad(k, "a non-negative integer", v),
        }
    }

    fn usize(&mut self, k: &str, v: &Value) -> Option<usize> {
        self.uint(k, v).map(|u| u as usize)
    }

    fn boolean(&mut self, k: &str, v: &Value) -> Option<bool> {
        match v {
            Value::Boolean(b) => Some(*b),
            _ => self.bad(k, "true or false", v),
        }
    }

    fn string(&mut self, k: &str, v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            _ => self.bad(k, "a string", v),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, k: &str, v: &Value) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.string(k, v)?;
        match s.parse() {
            Ok(t) => Some(t),
            Err(e) => {
                self.errors.push(format!("`{k}`: {e}"));
                None
            }
        }
    }

    fn list<T>(&mut self, k: &str, v: &Value, mut item: impl FnMut(&mut Self, &str, &Value) -> Option<T>) -> Option<Vec<T>> {
        match v {
            Value::Array(a) => {
                let out: Vec<Option<T>> = a.iter().map(|x| item(self, k, x)).collect();
                out.into_iter().collect()
            }
            _ => self.bad(k, "an array", v),
        }
    }

    fn bn(&mut self, k: &str, v: &Value) -> Option<BnMode> {
        match self.string(k, v)?.as_str() {
            "eval" | "running" => Some(BnMode::Eval),
            "batch_stats" | "batch" => Some(BnMode::BatchStats),
            other => {
                self.errors.push(format!("`{k}`: unknown bn mode `{other}` (expected eval or batch_stats)"));
                None
            }
        }
    }

    fn bad<T>(&mut self, k: &str, want: &str, v: &Value) -> Option<T> {
        self.errors.push(format!("`{k}` must be {want}, got `{v}`"));
        None
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ExperimentConfig {
    /// Parses config text; relative paths are joined to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        let mut r = Reader { errors: &mut errors };
        for (k, v) in &table {
            let t = &mut cfg.tta;
            match k.as_str() {
                "iterations" => set(&mut t.iterations, r.usize(k, v)),
                "lr" => set(&mut t.lr, r.float(k, v)),
                "batch_size" => set(&mut t.batch_size, r.usize(k, v)),
                "lambda" => set(&mut t.lambda, r.float(k, v)),
                "p" => set(&mut t.p, r.float(k, v)),
                "tau" => set(&mut t.tau, r.float(k, v)),
                "groups" | "G" => set(&mut t.groups, r.usize(k, v)),
                "crop" => {
                    let c = r.usize(k, v);
                    set(&mut t.crop, c);
                    set(&mut cfg.arch.crop, c);
                }
                "distortion_mode" => set(&mut t.distortion_mode, r.parsed::<DistortionMode>(k, v)),
                "seeds" => set(&mut t.seeds, r.list(k, v, Reader::uint)),
                "objective" => set(&mut t.objective, r.parsed::<Objective>(k, v)),
                "positive_in_denominator" => set(&mut t.positive_in_denominator, r.boolean(k, v)),
                "resample_triplets" => set(&mut t.resample_triplets, r.boolean(k, v)),
                "enabled" => set(&mut t.enabled, r.boolean(k, v)),
                "adapt_bn_mode" => set(&mut t.adapt_bn_mode, r.bn(k, v)),
                "predict_bn_mode" => set(&mut t.predict_bn_mode, r.bn(k, v)),
                "source_bn_mode" => set(&mut t.source_bn_mode, r.bn(k, v)),
                "beta1" => set(&mut t.beta1, r.float(k, v)),
                "beta2" => set(&mut t.beta2, r.float(k, v)),
                "adam_eps" => set(&mut t.adam_eps, r.float(k, v)),
                "widths" => set(&mut cfg.arch.widths, r.list(k, v, Reader::usize)),
                "arch_seed" => set(&mut cfg.arch.seed, r.uint(k, v)),
                "head_seed" => set(&mut cfg.arch.head_seed, r.uint(k, v)),
                "proj_dim" => set(&mut cfg.arch.proj_dim, r.usize(k, v)),
                "proj_hidden" => set(&mut cfg.arch.proj_hidden, r.usize(k, v)),
                "regressor_hidden" => set(&mut cfg.arch.regressor_hidden, r.usize(k, v)),
                "train_epochs" => set(&mut cfg.train.epochs, r.usize(k, v)),
                "train_batch_size" => set(&mut cfg.train.batch_size, r.usize(k, v)),
                "train_lr" => set(&mut cfg.train.lr, r.float(k, v)),
                "rotation_epochs" => set(&mut cfg.train.rotation_epochs, r.usize(k, v)),
                "train_seed" => set(&mut cfg.train.seed, r.uint(k, v)),
                "bench_train" => set(&mut cfg.bench.train_count, r.usize(k, v)),
                "bench_test" => set(&mut cfg.bench.test_count, r.usize(k, v)),
                "bench_size" => set(&mut cfg.bench.image_size, r.usize(k, v)),
                "bench_levels" => set(&mut cfg.bench.severity_levels, r.usize(k, v)),
                "bench_seed" => set(&mut cfg.bench_seed, r.uint(k, v)),
                "source_family" => set(&mut cfg.bench.source_family, r.list(k, v, Reader::parsed::<DistortionKind>)),
                "target_family" => set(&mut cfg.bench.target_family, r.list(k, v, Reader::parsed::<DistortionKind>)),
                "checkpoint" => cfg.checkpoint = r.string(k, v).map(|s| base.join(s)),
                "manifest" => cfg.manifest = r.string(k, v).map(|s| base.join(s)),
                "train_from_scratch" => set(&mut cfg.train_from_scratch, r.boolean(k, v)),
                other => {
                    if matches!(v, Value::Table(_)) {
                        r.errors.push(format!("`{other}`: nested tables are not supported (the format is flat)"));
                    } else {
                        r.errors.push(format!("unknown key `{other}`"));
                    }
                }
            }
        }
        errors.extend(cfg.validation_errors());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut e = self.tta.validation_errors();
        if let Err(Error::Config(a)) = self.arch.validate() {
            e.extend(a);
        }
        e.extend(self.bench.validation_errors());
        if self.tta.crop != self.arch.crop {
            e.push(format!("crop {} differs from the model crop {}", self.tta.crop, self.arch.crop));
        }
        if self.bench.image_size < self.tta.crop && self.manifest.is_none() {
            e.push(format!("bench_size {} is smaller than crop {}", self.bench.image_size, self.tta.crop));
        }
        if self.bench.channels != self.arch.in_channels {
            e.push("benchmark channels must match the model's input channels".into());
        }
        if self.train.epochs == 0 && self.checkpoint.is_none() {
            e.push("train_epochs is 0 and no checkpoint is given".into());
        }
        if self.train.batch_size < 2 {
            e.push("train_batch_size must be >= 2".into());
        }
        if self.bench.test_count < self.tta.batch_size && self.manifest.is_none() {
            e.push(format!("bench_test {} is smaller than batch_size {}", self.bench.test_count, self.tta.batch_size));
        }
        e
    }

    /// Applies a global seed override: every seed is offset by `seed`.
    pub fn with_seed_offset(mut self, seed: u64) -> Self {
        for s in &mut self.tta.seeds {
            *s = s.wrapping_add(seed);
        }
        self.train.seed = self.train.seed.wrapping_add(seed);
        self.bench_seed = self.bench_seed.wrapping_add(seed);
        self
    }

    /// Reads [`SEED_ENV`]; an unparsable value is a configuration error.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(s) => {
                let v: u64 = s.trim().parse().map_err(|_| Error::Config(vec![format!("{SEED_ENV}=`{s}` is not an integer")]))?;
                Ok(self.with_seed_offset(v))
            }
            Err(_) => Ok(self),
        }
    }

    /// Whether a saved checkpoint should be used rather than training.
    pub fn uses_checkpoint(&self) -> bool {
        self.checkpoint.is_some() && !self.train_from_scratch
    }
}

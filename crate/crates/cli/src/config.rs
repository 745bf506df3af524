//! Experiment files: a base model/train config plus sweep axes.
//!
//! ```toml
//! name = "stem-grid"
//! out_dir = "runs/stem-grid"
//! seeds = [0, 1, 2]
//!
//! [model]            # any ModelConfig field; omitted ones take the desk default
//! embed_dim = 32
//!
//! [train]            # any TrainConfig field
//! total_epochs = 10
//!
//! [sweep]            # every axis is optional; rows = cross product
//! stems = ["1Proj", "3Conv+3BN+3ReLU+1Proj"]
//! lrs = [8e-4, 4e-3, 8e-3]
//! optimizers = ["adamw", "sam"]
//! warmups = [0, 2, 5]
//!
//! [[points]]         # extra rows appended after the cross product
//! stem = "3Conv+1Proj"
//! warmup = 5
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vitstem::model::ModelConfig;
use vitstem::nn::FfnVariant;
use vitstem::stem::{default_strides, StemSpec};
use vitstem::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stems: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizers: Option<Vec<OptimizerKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmups: Option<Vec<usize>>,
    /// Conv-stem strides; patchify stems always use `[patch_size]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffns: Option<Vec<FfnVariant>>,
}

impl SweepAxes {
    fn any(&self) -> bool {
        self.stems.is_some()
            || self.lrs.is_some()
            || self.optimizers.is_some()
            || self.warmups.is_some()
            || self.strides.is_some()
            || self.ffns.is_some()
    }
}

/// One grid point; unset fields fall back to the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<FfnVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Epochs whose validation accuracy goes into the table, besides the
    /// final one.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    /// Write a model checkpoint next to each run report.
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<GridPoint>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_checkpoints() -> Vec<usize> {
    vec![5, 20]
}

/// A fully resolved run: one grid point at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    pub id: String,
    pub point: ResolvedPoint,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Axis values of a row as they appear in tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPoint {
    pub stem: String,
    pub strides: Vec<usize>,
    pub ffn: FfnVariant,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub warmup: usize,
}

impl fmt::Display for ResolvedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strides: Vec<String> = self.strides.iter().map(|s| s.to_string()).collect();
        write!(
            f,
            "{} ({}) ffn={} lr={} {} wm={}",
            self.stem,
            strides.join(","),
            self.ffn,
            self.lr,
            self.optimizer,
            self.warmup
        )
    }
}

pub fn is_filesystem_safe(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.len() <= 128
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Read and validate an experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Every invariant, checked eagerly so a sweep never starts on a bad row.
    pub fn validate(&self) -> Result<()> {
        if !is_filesystem_safe(&self.name) {
            bail!("name: {:?} must be non-empty and use only [A-Za-z0-9._-]", self.name);
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        let axes: [(&str, Option<usize>); 6] = [
            ("sweep.stems", self.sweep.stems.as_ref().map(Vec::len)),
            ("sweep.lrs", self.sweep.lrs.as_ref().map(Vec::len)),
            ("sweep.optimizers", self.sweep.optimizers.as_ref().map(Vec::len)),
            ("sweep.warmups", self.sweep.warmups.as_ref().map(Vec::len)),
            ("sweep.strides", self.sweep.strides.as_ref().map(Vec::len)),
            ("sweep.ffns", self.sweep.ffns.as_ref().map(Vec::len)),
        ];
        for (key, len) in axes {
            if len == Some(0) {
                bail!("{key}: an axis must list at least one value");
            }
        }
        self.plan().map(|_| ())
    }

    pub fn grid_points(&self) -> Vec<GridPoint> {
        fn opt<T: Clone>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
            match v {
                Some(v) => v.iter().cloned().map(Some).collect(),
                None => vec![None],
            }
        }
        let mut rows = Vec::new();
        if self.sweep.any() || self.points.is_empty() {
            let a = &self.sweep;
            for stem in opt(&a.stems) {
                for strides in opt(&a.strides) {
                    for ffn in opt(&a.ffns) {
                        for lr in opt(&a.lrs) {
                            for optimizer in opt(&a.optimizers) {
                                for warmup in opt(&a.warmups) {
                                    rows.push(GridPoint {
                                        stem: stem.clone(),
                                        lr,
                                        optimizer,
                                        warmup,
                                        strides: strides.clone(),
                                        ffn,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        rows.extend(self.points.iter().cloned());
        rows
    }

    fn resolve(&self, p: &GridPoint) -> Result<(ResolvedPoint, ModelConfig, TrainConfig)> {
        let stem = p.stem.clone().unwrap_or_else(|| self.model.stem.clone());
        let patch = self.model.patch_size;
        let probe =
            StemSpec::parse(&stem, &default_strides(&stem, patch)?, patch).with_context(|| format!("stem {stem:?}"))?;
        let weighted = probe.num_convs() + 1;
        // Base strides (and kernels) apply to any stem they fit; other stems
        // get the default strides for the patch size.
        let base_fits = self.model.strides.len() == weighted && self.model.strides.iter().product::<usize>() == patch;
        let (strides, kernels) = if probe.is_patchify() {
            (vec![patch], None)
        } else if let Some(s) = &p.strides {
            (s.clone(), self.model.kernels.clone().filter(|k| k.len() == weighted))
        } else if base_fits {
            (
                self.model.strides.clone(),
                self.model.kernels.clone().filter(|k| k.len() == weighted),
            )
        } else {
            if stem == self.model.stem {
                log::warn!(
                    "model.strides {:?} do not fit patch size {patch}; using defaults",
                    self.model.strides
                );
            }
            (default_strides(&stem, patch)?, None)
        };
        let model = ModelConfig {
            stem: probe.render(),
            strides: strides.clone(),
            kernels,
            ffn: p.ffn.unwrap_or(self.model.ffn),
            ..self.model.clone()
        };
        let train = TrainConfig {
            lr: p.lr.unwrap_or(self.train.lr),
            optimizer: p.optimizer.unwrap_or(self.train.optimizer),
            warmup_epochs: p.warmup.unwrap_or(self.train.warmup_epochs),
            ..self.train.clone()
        };
        let point = ResolvedPoint {
            stem: model.stem.clone(),
            strides,
            ffn: model.ffn,
            lr: train.lr,
            optimizer: train.optimizer,
            warmup: train.warmup_epochs,
        };
        model.validate().with_context(|| format!("model config for {point}"))?;
        train.validate().with_context(|| format!("train config for {point}"))?;
        Ok((point, model, train))
    }

    /// Every (grid point × seed) run, in table order.
    pub fn plan(&self) -> Result<Vec<RunSpec>> {
        let mut runs = Vec::new();
        let mut seen = BTreeMap::new();
        for (g, p) in self.grid_points().iter().enumerate() {
            let (point, model, train) = self.resolve(p)?;
            let key = serde_json::to_string(&point)?;
            if let Some(prev) = seen.insert(key, g) {
                log::warn!("grid point {g} repeats point {prev}: {point}");
            }
            for &seed in &self.seeds {
                let index = runs.len();
                runs.push(RunSpec {
                    index,
                    id: format!("run{index:04}-g{g:03}-s{seed}"),
                    point: point.clone(),
                    seed,
                    model: model.clone(),
                    train: TrainConfig { seed, ..train.clone() },
                });
            }
        }
        if runs.is_empty() {
            bail!("the sweep plans no runs");
        }
        Ok(runs)
    }
}

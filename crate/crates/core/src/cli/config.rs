//! Run configuration files.
//!
//! A config is a TOML document; sections are usually written as dotted keys:
//!
//! ```toml
//! benchmark = "2d-3mode"
//! seeds = [0, 1, 2]
//! train.steps = 8000
//! train.clip_percentile = "none"
//! flow.hidden_dims = [32, 32]
//! metrics.n_eval = 200000
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchmarkSpec, RunSettings};
use crate::diffnet::{Activation, InitScheme};
use crate::distributions::{TargetDensity, UniformBox};
use crate::metrics::{DEFAULT_N_EVAL, DEFAULT_N_PROJ};
use crate::training::{LrSchedule, TrainConfig, WeightNormalization};
use crate::{Error, Result};

/// A real that may be switched off with the string `"none"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Toggle {
    Value(f64),
    Keyword(Off),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Off {
    None,
}

impl Toggle {
    fn get(self) -> Option<f64> {
        match self {
            Toggle::Value(v) => Some(v),
            Toggle::Keyword(Off::None) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub adam_betas: Option<(f64, f64)>,
    pub adam_eps: Option<f64>,
    pub clip_percentile: Option<Toggle>,
    pub weight_normalization: Option<WeightNormalization>,
    pub grad_clip_norm: Option<Toggle>,
    pub n_train: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub n_layers: Option<usize>,
    pub hidden_dims: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub scale_clamp: Option<f64>,
    pub init: Option<InitScheme>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub modes: Option<usize>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub n_eval: Option<usize>,
    pub n_projections: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// `[x_min, x_max, y_min, y_max]`; for d = 3 applied to every axis pair.
    pub bounds: Option<[f64; 4]>,
    pub resolution: Option<usize>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: Option<String>,
    pub prior: Option<UniformBox>,
    pub target: Option<TargetDensity>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub base: BaseSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub grid: GridSection,
}

pub const DEFAULT_SAMPLE_N: usize = 10_000;
pub const DEFAULT_GRID_RESOLUTION: usize = 200;
pub const DEFAULT_GRID_SAMPLES: usize = 1_000_000;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The problem described by the config: a registry entry, optionally with
    /// its prior, target, or base mode count replaced inline.
    pub fn problem(&self) -> Result<BenchmarkSpec> {
        let mut spec = match (&self.benchmark, &self.target) {
            (Some(name), _) => bench::lookup(name)?,
            (None, Some(t)) => {
                let d = t.dim();
                BenchmarkSpec {
                    name: "custom".into(),
                    dim: d,
                    prior: UniformBox::symmetric(d, bench::PRIOR_HALF_WIDTH)?,
                    target: t.clone(),
                    base_modes: 1,
                }
            }
            (None, None) => return Err(Error::Config("config needs `benchmark` or `target`".into())),
        };
        if let Some(t) = &self.target {
            spec.target = t.clone();
            spec.dim = t.dim();
        }
        if let Some(p) = &self.prior {
            spec.prior = p.clone();
        }
        if let Some(k) = self.base.modes {
            if k == 0 {
                return Err(Error::Config("base.modes must be >= 1".into()));
            }
            spec.base_modes = k;
        }
        if spec.prior.dim() != spec.dim {
            return Err(Error::Config(format!(
                "prior has dimension {} but target has {}",
                spec.prior.dim(),
                spec.dim
            )));
        }
        Ok(spec)
    }

    /// Library defaults for `dim` with every configured field applied.
    pub fn settings(&self, dim: usize) -> Result<RunSettings> {
        let mut cfg = TrainConfig::default_for(dim);
        let t = &self.train;
        if let Some(v) = t.steps {
            cfg.steps = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = t.lr_schedule {
            cfg.lr_schedule = v;
        }
        if let Some(v) = t.adam_betas {
            cfg.adam_betas = v;
        }
        if let Some(v) = t.adam_eps {
            cfg.adam_eps = v;
        }
        if let Some(v) = t.clip_percentile {
            cfg.clip_percentile = v.get();
        }
        if let Some(v) = t.weight_normalization {
            cfg.weight_normalization = v;
        }
        if let Some(v) = t.grad_clip_norm {
            cfg.grad_clip_norm = v.get();
        }
        if let Some(v) = t.n_train {
            cfg.n_train = v;
        }
        let f = &self.flow;
        if let Some(v) = f.n_layers {
            cfg.flow.n_layers = v;
        }
        if let Some(v) = &f.hidden_dims {
            cfg.flow.hidden_dims = v.clone();
        }
        if let Some(v) = f.activation {
            cfg.flow.activation = v;
        }
        if let Some(v) = f.scale_clamp {
            cfg.flow.scale_clamp = v;
        }
        if let Some(v) = f.init {
            cfg.flow.init = v;
        }
        if let Some(v) = self.base.radius {
            cfg.base_radius = v;
        }
        cfg.seed = self.seed.unwrap_or(0);
        let settings = RunSettings {
            train: cfg,
            n_eval: self.metrics.n_eval.unwrap_or(DEFAULT_N_EVAL),
            n_projections: self.metrics.n_projections.unwrap_or(DEFAULT_N_PROJ),
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![0, 1, 2],
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

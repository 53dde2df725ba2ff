//! Likelihood-weighted training.
//!
//! A static dataset of prior draws is weighted by the likelihood of each draw,
//! the weights are optionally clipped and rescaled, and the flow is fitted by
//! minimizing `-(1/|b|) Σ wᵢ log q(θᵢ)` over shuffled minibatches with Adam.

mod adam;

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_step, global_norm, AdamConfig, AdamState};

use crate::distributions::{TargetDensity, UniformBox};
use crate::flow::{FlowConfig, FlowModel};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub prior: String,
    pub likelihood: String,
    pub seed: u64,
    pub n: usize,
}

/// Prior draws with their (raw) likelihood weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    thetas: Array2<f64>,
    weights: Vec<f64>,
    pub meta: DatasetMeta,
}

impl WeightedDataset {
    pub fn new(thetas: Array2<f64>, weights: Vec<f64>, meta: DatasetMeta) -> Result<Self> {
        if thetas.nrows() == 0 {
            return Err(Error::DegenerateDataset("dataset is empty".into()));
        }
        if thetas.nrows() != weights.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset weights",
                expected: thetas.nrows(),
                got: weights.len(),
            });
        }
        if thetas.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateDataset("non-finite parameter value".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::DegenerateDataset("weights must be finite and non-negative".into()));
        }
        Ok(Self { thetas, weights, meta })
    }

    pub fn thetas(&self) -> &Array2<f64> {
        &self.thetas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas.ncols()
    }
}

/// Draws `n` points uniformly from `prior` and weights each by `exp(target_log_prob)`.
pub fn generate_dataset(prior: &UniformBox, target: &TargetDensity, n: usize, seed: u64) -> Result<WeightedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    if prior.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "prior vs target",
            expected: prior.dim(),
            got: target.dim(),
        });
    }
    let thetas = prior.sample(n, seed);
    let weights = thetas
        .rows()
        .into_iter()
        .map(|r| target.log_prob(r.as_slice().expect("contiguous")).exp())
        .collect();
    let meta = DatasetMeta {
        prior: format!("uniform{:?}x{:?}", prior.lower(), prior.upper()),
        likelihood: target_label(target),
        seed,
        n,
    };
    WeightedDataset::new(thetas, weights, meta)
}

fn target_label(t: &TargetDensity) -> String {
    match t {
        TargetDensity::Gmm(m) => format!("gmm[{} components, d={}]", m.components().len(), m.dim()),
        TargetDensity::NonGaussProduct(p) => format!("nongauss_product[d={}]", p.axes().len()),
        TargetDensity::Uniform(b) => format!("uniform[d={}]", b.dim()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    #[default]
    MeanOne,
    None,
}

/// Step-size schedule; `learning_rate` is the initial (peak) rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over `steps`.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Weights above this nearest-rank percentile are set to it.
    pub clip_percentile: Option<f64>,
    pub weight_normalization: WeightNormalization,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub n_train: usize,
    pub flow: FlowConfig,
    /// Circumradius of the simplex holding the base mixture means.
    pub base_radius: f64,
}

impl TrainConfig {
    pub fn default_for(dim: usize) -> Self {
        Self {
            flow: FlowConfig::default_for(dim),
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            grad_clip_norm: self.grad_clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train == 0 {
            return bad("n_train must be >= 1");
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return bad("batch_size must be in 1..=n_train");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if let Some(p) = self.clip_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return bad("clip_percentile must lie in (0, 100]");
            }
        }
        if let Some(g) = self.grad_clip_norm {
            if !(g > 0.0) {
                return bad("grad_clip_norm must be > 0");
            }
        }
        if self.flow.hidden_dims.is_empty() || self.flow.hidden_dims.contains(&0) {
            return bad("flow.hidden_dims must be non-empty and positive");
        }
        if !(self.flow.scale_clamp > 0.0) {
            return bad("flow.scale_clamp must be > 0");
        }
        if !(self.base_radius >= 0.0) {
            return bad("base_radius must be >= 0");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 512,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_percentile: Some(99.9),
            weight_normalization: WeightNormalization::MeanOne,
            seed: 0,
            grad_clip_norm: Some(10.0),
            n_train: 100_000,
            flow: FlowConfig::default_for(2),
            base_radius: 5.0,
        }
    }
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the data at or below it.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Clips (if configured) and then normalizes the weights.
pub fn preprocess_weights(weights: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::DegenerateDataset("no weights".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::DegenerateDataset("weights must be finite and non-negative".into()));
    }
    let mut out = weights.to_vec();
    if let Some(p) = cfg.clip_percentile {
        let cap = nearest_rank_percentile(&out, p);
        for w in &mut out {
            if *w > cap {
                *w = cap;
            }
        }
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateDataset("all weights are zero".into()));
    }
    if cfg.weight_normalization == WeightNormalization::MeanOne {
        let scale = out.len() as f64 / total;
        for w in &mut out {
            *w *= scale;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
    pub params_hash: String,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// SHA-256 over the little-endian bit patterns of the parameters.
pub fn params_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs `cfg.steps` Adam updates on epoch-shuffled minibatches.
pub fn train(model: &FlowModel, data: &WeightedDataset, cfg: &TrainConfig) -> Result<(FlowModel, TrainTrace)> {
    let start = Instant::now();
    if model.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "model vs dataset",
            expected: model.dim(),
            got: data.dim(),
        });
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch_size {} does not fit a dataset of {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let weights = preprocess_weights(data.weights(), cfg)?;
    let mut model = model.clone();
    let mut params = model.params_flat();
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(cfg.steps),
        wall_time_s: 0.0,
        params_hash: String::new(),
    };
    let mut adam = cfg.adam();
    let mut state = AdamState::new(params.len());
    let mut shuffle_rng = rng::seeded(rng::derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut batch_w = vec![0.0; cfg.batch_size];

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let batch = data.thetas().select(Axis(0), idx);
        for (bw, &i) in batch_w.iter_mut().zip(idx) {
            *bw = weights[i];
        }
        let (loss, grad) = match model.weighted_nll_with_grad(batch.view(), &batch_w) {
            Ok(v) => v,
            Err(Error::Instability { .. }) => return Err(Error::TrainingDiverged { step, params }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step, params });
        }
        trace.losses.push(loss);
        adam.learning_rate = cfg.learning_rate * cfg.lr_schedule.factor(step, cfg.steps);
        let mut next = params.clone();
        adam_step(&mut next, &grad, &mut state, &adam);
        model.set_params_flat(&next)?;
        params = next;
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    trace.params_hash = params_hash(&params);
    Ok((model, trace))
}

/// Weighted NLL over a whole dataset, using preprocessed weights.
pub fn dataset_loss(model: &FlowModel, thetas: &Array2<f64>, weights: &[f64]) -> Result<f64> {
    let lq = model.log_prob_batch(thetas.view())?;
    let n = weights.len() as f64;
    Ok(-lq.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() / n)
}

#[cfg(test)]
mod tests;

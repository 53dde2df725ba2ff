//! Benchmark registry and experiment harness.
//!
//! Every benchmark is a (prior, target, base-mode count) triple. Runs with the
//! same target and seed share one dataset, so the `model-*` variants differ
//! only in the base distribution.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::{GaussianMixture, NonGaussProduct, TargetDensity, UniformBox};
use crate::flow::{simplex_base, FlowModel};
use crate::io;
use crate::metrics::{self, EvalSamples, MetricsReport, DEFAULT_N_EVAL, DEFAULT_N_PROJ};
use crate::rng;
use crate::training::{self, TrainConfig, TrainTrace, WeightedDataset};
use crate::{Error, Result};

pub const PRIOR_HALF_WIDTH: f64 = 12.0;
pub const COV_2D: [f64; 4] = [2.0, 0.8, 0.8, 1.5];
pub const COV_3D: [f64; 9] = [1.5, 0.4, 0.2, 0.4, 1.2, 0.3, 0.2, 0.3, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub dim: usize,
    pub prior: UniformBox,
    pub target: TargetDensity,
    pub base_modes: usize,
}

impl BenchmarkSpec {
    pub fn base(&self, radius: f64) -> Result<GaussianMixture> {
        simplex_base(self.dim, self.base_modes, radius)
    }
}

fn spec(name: &str, prior: UniformBox, target: TargetDensity, base_modes: usize) -> BenchmarkSpec {
    BenchmarkSpec {
        name: name.to_string(),
        dim: target.dim(),
        prior,
        target,
        base_modes,
    }
}

fn gmm(means: &[Vec<f64>], cov: &[f64]) -> TargetDensity {
    TargetDensity::Gmm(GaussianMixture::equal_shared_covariance(means, cov).expect("registry covariance is SPD"))
}

pub fn target_2d_three_modes() -> TargetDensity {
    gmm(&[vec![-6.0, 6.0], vec![6.0, 6.0], vec![0.0, -6.0]], &COV_2D)
}

pub fn target_3d_three_modes() -> TargetDensity {
    gmm(&[vec![5.0, 5.0, -5.0], vec![5.0, 7.0, 5.0], vec![-5.0, 7.0, 5.0]], &COV_3D)
}

/// All registered benchmarks, in a fixed order.
pub fn registry() -> Vec<BenchmarkSpec> {
    let box2 = UniformBox::symmetric(2, PRIOR_HALF_WIDTH).expect("valid box");
    let box3 = UniformBox::symmetric(3, PRIOR_HALF_WIDTH).expect("valid box");
    let mut out = vec![
        spec("2d-1mode", box2.clone(), gmm(&[vec![-3.0, 3.0]], &COV_2D), 1),
        spec("2d-2mode", box2.clone(), gmm(&[vec![-6.0, 3.0], vec![6.0, 3.0]], &COV_2D), 1),
        spec("2d-3mode", box2.clone(), target_2d_three_modes(), 1),
    ];
    for k in 1..=3 {
        out.push(spec(&format!("model-2d-{k}"), box2.clone(), target_2d_three_modes(), k));
    }
    for k in 1..=3 {
        out.push(spec(&format!("model-3d-{k}"), box3.clone(), target_3d_three_modes(), k));
    }
    for k in 1..=3 {
        out.push(spec(
            &format!("model-nongauss-{k}"),
            box3.clone(),
            TargetDensity::NonGaussProduct(NonGaussProduct::three_mode()),
            k,
        ));
    }
    out
}

pub fn lookup(name: &str) -> Result<BenchmarkSpec> {
    registry()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::NotFound(format!("benchmark {name:?}")))
}

/// Training and evaluation settings for a harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub n_eval: usize,
    pub n_projections: usize,
}

impl RunSettings {
    pub fn default_for(dim: usize) -> Self {
        Self {
            train: TrainConfig::default_for(dim),
            n_eval: DEFAULT_N_EVAL,
            n_projections: DEFAULT_N_PROJ,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_eval == 0 || self.n_projections == 0 {
            return Err(Error::Config("n_eval and n_projections must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fingerprint of everything that determines a run's outputs.
pub fn config_hash(spec: &BenchmarkSpec, settings: &RunSettings, seed: u64) -> String {
    let doc = serde_json::json!({
        "benchmark": spec,
        "settings": settings,
        "seed": seed,
    });
    let mut h = Sha256::new();
    h.update(doc.to_string().as_bytes());
    hex::encode(h.finalize())
}

/// Seed of the dataset for a run. Depends only on the run seed, so all base
/// variants of a target see the same data.
pub fn dataset_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "dataset")
}

pub fn dataset_for(spec: &BenchmarkSpec, n: usize, seed: u64) -> Result<WeightedDataset> {
    training::generate_dataset(&spec.prior, &spec.target, n, dataset_seed(seed))
}

/// Everything a single (benchmark, seed) run produces.
pub struct SeedRun {
    pub model: FlowModel,
    pub trace: TrainTrace,
    pub report: MetricsReport,
    pub samples: EvalSamples,
}

/// Dataset → preprocess → train → evaluate for one seed.
pub fn run_seed(spec: &BenchmarkSpec, settings: &RunSettings, seed: u64) -> Result<SeedRun> {
    settings.validate()?;
    let data = dataset_for(spec, settings.train.n_train, seed)?;
    run_seed_on(spec, settings, seed, &data)
}

/// As [`run_seed`], on an already generated dataset.
pub fn run_seed_on(spec: &BenchmarkSpec, settings: &RunSettings, seed: u64, data: &WeightedDataset) -> Result<SeedRun> {
    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let base = spec.base(cfg.base_radius)?;
    let init = FlowModel::build(spec.dim, &cfg.flow, base, rng::derive_seed(seed, "init"))?;
    let (model, trace) = training::train(&init, data, &cfg)?;

    let weights = training::preprocess_weights(data.weights(), &cfg)?;
    let final_loss = training::dataset_loss(&model, data.thetas(), &weights).ok();
    let n_clipped = match cfg.clip_percentile {
        Some(p) => {
            let cap = training::nearest_rank_percentile(data.weights(), p);
            data.weights().iter().filter(|w| **w > cap).count()
        }
        None => 0,
    };

    let (mut report, samples) = metrics::evaluate(
        &spec.target,
        &model,
        settings.n_eval,
        settings.n_projections,
        rng::derive_seed(seed, "evaluate"),
    )?;
    report.seed = seed;
    report.config_hash = config_hash(spec, settings, seed);
    report.final_loss = final_loss;
    report.architecture = Some(serde_json::json!({
        "n_layers": cfg.flow.n_layers,
        "hidden_dims": cfg.flow.hidden_dims,
        "activation": cfg.flow.activation,
        "scale_clamp": cfg.flow.scale_clamp,
        "base_modes": spec.base_modes,
        "base_radius": cfg.base_radius,
        "n_params": model.num_params(),
    }));
    report.clipping = Some(metrics::ClippingInfo {
        percentile: cfg.clip_percentile,
        n_clipped,
    });
    Ok(SeedRun {
        model,
        trace,
        report,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub aborted: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianReport {
    pub kl: Option<f64>,
    pub w1_marginal_avg: Option<f64>,
    pub w1_sliced: Option<f64>,
    pub final_loss: Option<f64>,
    pub n_completed: usize,
    pub n_aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub benchmark: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedOutcome>,
    pub median: MedianReport,
}

pub fn median_of(runs: &[SeedOutcome]) -> MedianReport {
    let reports: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        metrics::median(&v)
    };
    MedianReport {
        kl: pick(&|r| Some(r.kl)),
        w1_marginal_avg: pick(&|r| Some(r.w1_marginal_avg)),
        w1_sliced: pick(&|r| Some(r.w1_sliced)),
        final_loss: pick(&|r| r.final_loss),
        n_completed: reports.len(),
        n_aborted: runs.iter().filter(|r| r.aborted).count(),
    }
}

/// Writes `<dir>/{model.wflow, trace.csv, samples.csv, report.json}`.
pub fn write_seed_outputs(dir: &Path, run: &SeedRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    run.model.save(&dir.join("model.wflow"))?;
    io::write_csv(
        &dir.join("trace.csv"),
        &["step".to_string(), "loss".to_string()],
        run.trace.losses.iter().enumerate().map(|(i, l)| [i as f64, *l]),
    )?;
    let mut header = io::theta_header(run.model.dim());
    header.push("log_q".into());
    io::write_matrix_csv(
        &dir.join("samples.csv"),
        &header,
        &run.samples.model,
        Some(run.samples.model_log_q.as_slice().expect("contiguous")),
    )?;
    io::write_json(&dir.join("report.json"), &run.report)
}

/// Runs every seed (up to `jobs` concurrently), writes the output tree under
/// `out/<benchmark>/` when `out` is given, and returns the summary.
///
/// Training or evaluation failures are recorded per seed; configuration and
/// I/O failures abort the whole call.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    settings: &RunSettings,
    seeds: &[u64],
    out: Option<&Path>,
    jobs: usize,
) -> Result<BenchmarkSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    settings.validate()?;
    let one = |seed: u64| -> Result<SeedOutcome> {
        let start = Instant::now();
        match run_seed(spec, settings, seed) {
            Ok(run) => {
                if let Some(root) = out {
                    write_seed_outputs(&seed_dir(root, &spec.name, seed), &run)?;
                }
                Ok(SeedOutcome {
                    seed,
                    report: Some(run.report),
                    error: None,
                    aborted: false,
                    wall_time_s: start.elapsed().as_secs_f64(),
                })
            }
            Err(e @ (Error::TrainingDiverged { .. } | Error::Instability { .. } | Error::DegenerateDataset(_))) => {
                Ok(SeedOutcome {
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                    aborted: true,
                    wall_time_s: start.elapsed().as_secs_f64(),
                })
            }
            Err(e) => Err(e),
        }
    };
    let runs: Vec<SeedOutcome> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(|&s| one(s)).collect::<Result<Vec<_>>>())?
    } else {
        seeds.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()?
    };
    let summary = BenchmarkSummary {
        benchmark: spec.name.clone(),
        seeds: seeds.to_vec(),
        median: median_of(&runs),
        runs,
    };
    if let Some(root) = out {
        io::write_json(&root.join(&spec.name).join("summary.json"), &summary)?;
    }
    Ok(summary)
}

pub fn seed_dir(root: &Path, benchmark: &str, seed: u64) -> PathBuf {
    root.join(benchmark).join(seed.to_string())
}

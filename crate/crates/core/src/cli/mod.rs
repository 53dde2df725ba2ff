//! `wflow` command line.
//!
//! Every subcommand takes `--config <file>`; `--seed`, `--out` and (for
//! `benchmark`) `--jobs` override the file. Exit codes: 0 success, 2 invalid
//! configuration or input, 3 numerical instability, 4 I/O failure.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{self, BenchmarkSpec, RunSettings};
use crate::distributions::TargetDensity;
use crate::flow::FlowModel;
use crate::io;
use crate::metrics;
use crate::rng;
use crate::training::{self, DatasetMeta, WeightedDataset};
use crate::{Error, Result};

pub use config::RunConfig;

pub const THREADS_ENV: &str = "WFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wflow", version, about = "Likelihood-weighted normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw prior samples and write `dataset.csv` with raw likelihood weights.
    Generate(Common),
    /// Train a flow; writes `model.wflow` and `trace.csv`.
    Train(Common),
    /// Sample a trained flow; writes `samples.csv`.
    Sample(Common),
    /// Score a trained flow against a benchmark target; writes `report.json`.
    Evaluate(Common),
    /// Run a benchmark over several seeds; writes the full output tree.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Concurrent (benchmark, seed) jobs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Density grid for plotting; writes `grid.csv`.
    Grid(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
        cfg.seeds = Some(vec![s]);
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

/// Worker cap from `WFLOW_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cap = thread_cap()?;
    if let Some(n) = cap {
        // Fails only if a global pool already exists, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate(c) => cmd_generate(&load_config(&c)?),
        Command::Train(c) => cmd_train(&load_config(&c)?),
        Command::Sample(c) => cmd_sample(&load_config(&c)?),
        Command::Evaluate(c) => cmd_evaluate(&load_config(&c)?),
        Command::Benchmark { common, jobs } => {
            let mut cfg = load_config(&common)?;
            if jobs.is_some() {
                cfg.jobs = jobs;
            }
            let jobs = cfg.jobs.unwrap_or(1).max(1);
            let jobs = cap.map_or(jobs, |c| jobs.min(c));
            cmd_benchmark(&cfg, jobs)
        }
        Command::Grid(c) => cmd_grid(&load_config(&c)?),
    }
}

fn dataset_header(dim: usize) -> Vec<String> {
    let mut h = io::theta_header(dim);
    h.push("weight".into());
    h
}

pub fn write_dataset(path: &Path, data: &WeightedDataset) -> Result<()> {
    io::write_matrix_csv(path, &dataset_header(data.dim()), data.thetas(), Some(data.weights()))
}

pub fn read_dataset(path: &Path) -> Result<WeightedDataset> {
    let t = io::read_csv(path)?;
    let d = t.header.len().saturating_sub(1);
    if d == 0 || t.header != dataset_header(d) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}", dataset_header(d.max(1)).join(",")),
        });
    }
    if t.data.nrows() == 0 {
        return Err(Error::DegenerateDataset(format!("{}: no rows", path.display())));
    }
    let thetas = t.data.slice(ndarray::s![.., ..d]).to_owned();
    let weights = t.data.column(d).to_vec();
    for (i, w) in weights.iter().enumerate() {
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("weight must be finite and >= 0, got {w}"),
            });
        }
    }
    let n = weights.len();
    WeightedDataset::new(
        thetas,
        weights,
        DatasetMeta {
            prior: "file".into(),
            likelihood: path.display().to_string(),
            seed: 0,
            n,
        },
    )
}

fn dataset_from_config(cfg: &RunConfig, spec: &BenchmarkSpec, settings: &RunSettings) -> Result<WeightedDataset> {
    match &cfg.dataset {
        Some(p) => {
            let d = read_dataset(p)?;
            if d.dim() != spec.dim {
                return Err(Error::DimensionMismatch {
                    context: "dataset vs problem",
                    expected: spec.dim,
                    got: d.dim(),
                });
            }
            Ok(d)
        }
        None => bench::dataset_for(spec, settings.train.n_train, cfg.seed()),
    }
}

#[derive(Serialize)]
struct WeightStats {
    n: usize,
    d: usize,
    weight_min: f64,
    weight_max: f64,
    weight_mean: f64,
    n_zero: usize,
    effective_sample_size: f64,
}

fn weight_stats(data: &WeightedDataset) -> WeightStats {
    let w = data.weights();
    let sum: f64 = w.iter().sum();
    let sq: f64 = w.iter().map(|x| x * x).sum();
    WeightStats {
        n: w.len(),
        d: data.dim(),
        weight_min: w.iter().copied().fold(f64::INFINITY, f64::min),
        weight_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        weight_mean: sum / w.len() as f64,
        n_zero: w.iter().filter(|x| **x == 0.0).count(),
        effective_sample_size: if sq > 0.0 { sum * sum / sq } else { 0.0 },
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.problem()?;
    let settings = cfg.settings(spec.dim)?;
    let data = bench::dataset_for(&spec, settings.train.n_train, cfg.seed())?;
    let path = cfg.out_dir().join("dataset.csv");
    write_dataset(&path, &data)?;
    let s = weight_stats(&data);
    println!(
        "wrote {} (N={}, d={}, weight min={:.3e} max={:.3e} mean={:.3e}, zero={}, ESS={:.1})",
        path.display(),
        s.n,
        s.d,
        s.weight_min,
        s.weight_max,
        s.weight_mean,
        s.n_zero,
        s.effective_sample_size
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.problem()?;
    let settings = cfg.settings(spec.dim)?;
    let data = dataset_from_config(cfg, &spec, &settings)?;
    let mut tc = settings.train.clone();
    tc.seed = cfg.seed();
    if tc.batch_size > data.len() {
        return Err(Error::Config(format!(
            "train.batch_size {} exceeds the dataset size {}",
            tc.batch_size,
            data.len()
        )));
    }
    let base = spec.base(tc.base_radius)?;
    let init = FlowModel::build(spec.dim, &tc.flow, base, rng::derive_seed(tc.seed, "init"))?;
    let (model, trace) = training::train(&init, &data, &tc)?;
    let out = cfg.out_dir();
    model.save(&out.join("model.wflow"))?;
    io::write_csv(
        &out.join("trace.csv"),
        &["step".to_string(), "loss".to_string()],
        trace.losses.iter().enumerate().map(|(i, l)| [i as f64, *l]),
    )?;
    match (trace.losses.first(), trace.final_loss()) {
        (Some(a), Some(b)) => println!(
            "trained {} steps in {:.1}s: loss {a:.4} -> {b:.4} (params {})",
            trace.losses.len(),
            trace.wall_time_s,
            &trace.params_hash[..12]
        ),
        _ => println!("no training steps; wrote initial model"),
    }
    Ok(())
}

fn model_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.model
        .clone()
        .ok_or_else(|| Error::Config("config needs `model = <path to model.wflow>`".into()))
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let model = FlowModel::load(&model_path(cfg)?)?;
    let n = cfg.sample.n.unwrap_or(config::DEFAULT_SAMPLE_N);
    if n == 0 {
        return Err(Error::Config("sample.n must be >= 1".into()));
    }
    let (x, lq) = model.sample_with_log_prob(n, cfg.seed())?;
    if lq.iter().any(|v| !v.is_finite()) {
        return Err(Error::Instability {
            layer: model.layers().len(),
            detail: "non-finite log-density in drawn samples".into(),
        });
    }
    let mut header = io::theta_header(model.dim());
    header.push("log_q".into());
    let path = cfg.out_dir().join("samples.csv");
    io::write_matrix_csv(&path, &header, &x, Some(lq.as_slice().expect("contiguous")))?;
    println!("wrote {} ({n} rows)", path.display());
    Ok(())
}

fn model_fingerprint(model: &FlowModel) -> String {
    hex::encode(Sha256::digest(model.to_bytes()))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let model = FlowModel::load(&model_path(cfg)?)?;
    let spec = cfg.problem()?;
    if spec.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "model vs benchmark",
            expected: spec.dim,
            got: model.dim(),
        });
    }
    let settings = cfg.settings(spec.dim)?;
    let seed = cfg.seed();
    let (mut report, _) = metrics::evaluate(
        &spec.target,
        &model,
        settings.n_eval,
        settings.n_projections,
        rng::derive_seed(seed, "evaluate"),
    )?;
    report.seed = seed;
    let mut h = Sha256::new();
    h.update(model_fingerprint(&model).as_bytes());
    h.update(serde_json::json!({ "benchmark": spec, "n_eval": settings.n_eval, "n_projections": settings.n_projections, "seed": seed }).to_string().as_bytes());
    report.config_hash = hex::encode(h.finalize());
    let path = cfg.out_dir().join("report.json");
    io::write_json(&path, &report)?;
    println!(
        "kl={:.5} (±{:.5}) w1_marginal_avg={:.4} w1_sliced={:.4} -> {}",
        report.kl,
        report.kl_stderr,
        report.w1_marginal_avg,
        report.w1_sliced,
        path.display()
    );
    Ok(())
}

pub fn cmd_benchmark(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let spec = cfg.problem()?;
    let settings = cfg.settings(spec.dim)?;
    let seeds = cfg.seeds();
    let out = cfg.out_dir();
    let summary = bench::run_benchmark(&spec, &settings, &seeds, Some(&out), jobs)?;
    for r in &summary.runs {
        match (&r.report, &r.error) {
            (Some(rep), _) => println!(
                "{} seed {}: kl={:.5} w1_avg={:.4} w1_sliced={:.4} ({:.0}s)",
                spec.name, r.seed, rep.kl, rep.w1_marginal_avg, rep.w1_sliced, r.wall_time_s
            ),
            (None, e) => println!("{} seed {}: aborted: {}", spec.name, r.seed, e.as_deref().unwrap_or("")),
        }
    }
    let m = &summary.median;
    println!(
        "{} median over {} run(s): kl={} w1_avg={}",
        spec.name,
        m.n_completed,
        m.kl.map_or("n/a".into(), |v| format!("{v:.5}")),
        m.w1_marginal_avg.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    if m.n_completed == 0 {
        return Err(Error::Instability {
            layer: 0,
            detail: "every seed aborted".into(),
        });
    }
    Ok(())
}

/// Cell-centre coordinates of a regular `res × res` grid over `bounds`.
pub fn grid_axes(bounds: [f64; 4], res: usize) -> (Vec<f64>, Vec<f64>) {
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let h = (hi - lo) / res as f64;
        (0..res).map(|i| lo + (i as f64 + 0.5) * h).collect()
    };
    (axis(bounds[0], bounds[1]), axis(bounds[2], bounds[3]))
}

/// `(x, y, density)` rows for a 2D density evaluated at cell centres.
pub fn density_grid_2d(logp: impl Fn(&Array2<f64>) -> Result<Vec<f64>>, bounds: [f64; 4], res: usize) -> Result<Vec<[f64; 3]>> {
    let (xs, ys) = grid_axes(bounds, res);
    let mut pts = Array2::zeros((res * res, 2));
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            pts[[i * res + j, 0]] = x;
            pts[[i * res + j, 1]] = y;
        }
    }
    let lp = logp(&pts)?;
    Ok(pts
        .rows()
        .into_iter()
        .zip(lp)
        .map(|(r, l)| [r[0], r[1], l.exp()])
        .collect())
}

/// Histogram density estimate of every axis-pair marginal of `samples`.
/// Rows are `(axis_i, axis_j, x, y, marginal)`.
pub fn marginal_grids(samples: &Array2<f64>, bounds: [f64; 4], res: usize) -> Vec<[f64; 5]> {
    let d = samples.ncols();
    let n = samples.nrows() as f64;
    let hx = (bounds[1] - bounds[0]) / res as f64;
    let hy = (bounds[3] - bounds[2]) / res as f64;
    let (xs, ys) = grid_axes(bounds, res);
    let bin = |v: f64, lo: f64, h: f64| -> Option<usize> {
        let k = ((v - lo) / h).floor();
        (k >= 0.0 && (k as usize) < res).then_some(k as usize)
    };
    let mut rows = Vec::new();
    for a in 0..d {
        for b in (a + 1)..d {
            let mut counts = vec![0usize; res * res];
            for r in samples.rows() {
                if let (Some(i), Some(j)) = (bin(r[a], bounds[0], hx), bin(r[b], bounds[2], hy)) {
                    counts[i * res + j] += 1;
                }
            }
            for i in 0..res {
                for j in 0..res {
                    let dens = counts[i * res + j] as f64 / (n * hx * hy);
                    rows.push([a as f64, b as f64, xs[i], ys[j], dens]);
                }
            }
        }
    }
    rows
}

fn target_log_probs(t: &TargetDensity, pts: &Array2<f64>) -> Vec<f64> {
    pts.rows().into_iter().map(|r| t.log_prob(&r.to_vec())).collect()
}

pub fn cmd_grid(cfg: &RunConfig) -> Result<()> {
    let res = cfg.grid.resolution.unwrap_or(config::DEFAULT_GRID_RESOLUTION);
    if res == 0 {
        return Err(Error::Config("grid.resolution must be >= 1".into()));
    }
    let model = match &cfg.model {
        Some(p) => Some(FlowModel::load(p)?),
        None => None,
    };
    let spec = match (&model, cfg.benchmark.is_some() || cfg.target.is_some()) {
        (_, true) => Some(cfg.problem()?),
        (Some(_), false) => None,
        (None, false) => return Err(Error::Config("grid needs `model` or `benchmark`".into())),
    };
    let dim = model.as_ref().map_or_else(|| spec.as_ref().map_or(2, |s| s.dim), |m| m.dim());
    let bounds = match cfg.grid.bounds {
        Some(b) => b,
        None => match &spec {
            Some(s) => [s.prior.lower()[0], s.prior.upper()[0], s.prior.lower()[1], s.prior.upper()[1]],
            None => [-bench::PRIOR_HALF_WIDTH, bench::PRIOR_HALF_WIDTH, -bench::PRIOR_HALF_WIDTH, bench::PRIOR_HALF_WIDTH],
        },
    };
    if !(bounds[0] < bounds[1] && bounds[2] < bounds[3]) || bounds.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("grid.bounds must be [x_min, x_max, y_min, y_max] with min < max".into()));
    }
    let path = cfg.out_dir().join("grid.csv");
    match dim {
        2 => {
            let rows = match (&model, &spec) {
                (Some(m), _) => density_grid_2d(|p| m.log_prob_batch_lossy(p.view()), bounds, res)?,
                (None, Some(s)) => density_grid_2d(|p| Ok(target_log_probs(&s.target, p)), bounds, res)?,
                (None, None) => unreachable!("checked above"),
            };
            io::write_csv(&path, &["x".into(), "y".into(), "density".into()], rows)?;
        }
        3 => {
            let n = cfg.grid.n_samples.unwrap_or(config::DEFAULT_GRID_SAMPLES);
            if n == 0 {
                return Err(Error::Config("grid.n_samples must be >= 1".into()));
            }
            let samples = match (&model, &spec) {
                (Some(m), _) => m.sample(n, cfg.seed())?,
                (None, Some(s)) => s.target.sample(n, cfg.seed()),
                (None, None) => unreachable!("checked above"),
            };
            let header = ["axis_i", "axis_j", "x", "y", "marginal"].map(String::from);
            io::write_csv(&path, &header, marginal_grids(&samples, bounds, res))?;
        }
        d => return Err(Error::Config(format!("grid supports d = 2 or 3, got {d}"))),
    }
    println!("wrote {}", path.display());
    Ok(())
}

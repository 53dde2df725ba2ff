//! End-to-end checks of the `wflow` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wflow::io::read_csv;

fn wflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wflow"))
        .args(args)
        .env_remove("WFLOW_THREADS")
        .output()
        .expect("spawn wflow")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let out = wflow(args);
    assert!(
        out.status.success(),
        "wflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &str = r#"
benchmark = "2d-1mode"
seed = 7
train.n_train = 1000
train.steps = 40
train.batch_size = 100
flow.n_layers = 4
flow.hidden_dims = [8, 8]
metrics.n_eval = 2000
metrics.n_projections = 8
sample.n = 500
"#;

#[test]
fn generate_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let t = read_csv(&a.join("dataset.csv")).unwrap();
    assert_eq!(t.header, vec!["theta_0", "theta_1", "weight"]);
    assert_eq!(t.data.nrows(), 1000);
    assert_eq!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
}

#[test]
fn zero_dataset_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "benchmark = \"2d-1mode\"\ntrain.n_train = 0\n");
    let out = wflow(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("dataset.csv").exists());
}

#[test]
fn unknown_key_and_missing_file_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "benchmark = \"2d-1mode\"\ntrain.stepz = 1\n");
    assert_eq!(wflow(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(wflow(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(wflow(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_sample_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.toml", SMALL);
    let run = d.join("run");
    let c = cfg.to_str().unwrap();
    let r = run.to_str().unwrap();
    run_ok(&["train", "--config", c, "--out", r]);
    let trace = read_csv(&run.join("trace.csv")).unwrap();
    assert_eq!(trace.header, vec!["step", "loss"]);
    assert_eq!(trace.data.nrows(), 40);
    let first = trace.data[[0, 1]];
    let last = trace.data[[39, 1]];
    assert!(last < first, "{first} -> {last}");

    let model = run.join("model.wflow");
    let body = format!("{SMALL}model = {:?}\n", model.to_str().unwrap());
    let cfg2 = write_config(d, "c2.toml", &body);
    let c2 = cfg2.to_str().unwrap();
    run_ok(&["sample", "--config", c2, "--out", r]);
    let s = read_csv(&run.join("samples.csv")).unwrap();
    assert_eq!(s.header, vec!["theta_0", "theta_1", "log_q"]);
    assert_eq!(s.data.nrows(), 500);

    // log_q must agree with a fresh density evaluation of the saved model.
    let m = wflow::flow::FlowModel::load(&model).unwrap();
    let theta = s.data.slice(ndarray::s![.., ..2]).to_owned();
    let lq = m.log_prob_batch(theta.view()).unwrap();
    for (a, b) in lq.iter().zip(s.data.column(2)) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    let before = fs::read(run.join("samples.csv")).unwrap();
    run_ok(&["sample", "--config", c2, "--out", r]);
    assert_eq!(before, fs::read(run.join("samples.csv")).unwrap());

    run_ok(&["evaluate", "--config", c2, "--out", r]);
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    for k in ["kl", "w1_marginal_avg", "w1_sliced", "n_eval", "n_projections", "seed", "config_hash"] {
        assert!(rep.get(k).is_some(), "missing {k}");
    }
    assert_eq!(rep["n_eval"], 2000);
}

#[test]
fn zero_steps_writes_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("train.steps = 40", "train.steps = 0");
    let cfg = write_config(dir.path(), "c.toml", &body);
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let rc = wflow::cli::RunConfig::parse(&body).unwrap();
    let spec = rc.problem().unwrap();
    let settings = rc.settings(spec.dim).unwrap();
    let init = wflow::flow::FlowModel::build(
        spec.dim,
        &settings.train.flow,
        spec.base(settings.train.base_radius).unwrap(),
        wflow::rng::derive_seed(7, "init"),
    )
    .unwrap();
    assert_eq!(fs::read(dir.path().join("model.wflow")).unwrap(), init.to_bytes());
}

#[test]
fn corrupted_dataset_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dataset.csv");
    fs::write(&data, "theta_0,theta_1,weight\n0.1,0.2,1.0\n0.3,zzz,1.0\n").unwrap();
    let body = format!("{SMALL}dataset = {:?}\n", data.to_str().unwrap());
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = wflow(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn trains_from_generated_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["generate", "--config", c, "--out", a.to_str().unwrap()]);
    let body = format!("{SMALL}dataset = {:?}\n", a.join("dataset.csv").to_str().unwrap());
    let cfg_file = write_config(dir.path(), "c2.toml", &body);
    run_ok(&["train", "--config", cfg_file.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", c, "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("model.wflow")).unwrap(), fs::read(b.join("model.wflow")).unwrap());
}

#[test]
fn benchmark_layout_and_in_process_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("seed = 7", "seeds = [1, 2]");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("runs");
    run_ok(&["benchmark", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    for seed in [1, 2] {
        for f in ["model.wflow", "trace.csv", "samples.csv", "report.json"] {
            assert!(out.join("2d-1mode").join(seed.to_string()).join(f).is_file());
        }
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("2d-1mode/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["median"]["n_completed"], 2);

    let rc = wflow::cli::RunConfig::parse(&body).unwrap();
    let spec = rc.problem().unwrap();
    let settings = rc.settings(spec.dim).unwrap();
    let run = wflow::bench::run_seed(&spec, &settings, 2).unwrap();
    let on_disk: wflow::metrics::MetricsReport =
        serde_json::from_slice(&fs::read(out.join("2d-1mode/2/report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, run.report);

    // cmd_evaluate on the saved model reproduces the harness metrics.
    let eval_body = format!(
        "{}model = {:?}\n",
        body.replace("seeds = [1, 2]", "seed = 2"),
        out.join("2d-1mode/2/model.wflow").to_str().unwrap()
    );
    let ecfg = write_config(dir.path(), "e.toml", &eval_body);
    let edir = dir.path().join("eval");
    run_ok(&["evaluate", "--config", ecfg.to_str().unwrap(), "--out", edir.to_str().unwrap()]);
    let ev: wflow::metrics::MetricsReport =
        serde_json::from_slice(&fs::read(edir.join("report.json")).unwrap()).unwrap();
    assert_eq!(ev.kl, run.report.kl);
    assert_eq!(ev.w1_marginal_avg, run.report.w1_marginal_avg);
    assert_eq!(ev.w1_sliced, run.report.w1_sliced);
}

#[test]
fn ground_truth_grid_peaks_at_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "g.toml",
        "benchmark = \"2d-1mode\"\ngrid.resolution = 48\n",
    );
    run_ok(&["grid", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let g = read_csv(&dir.path().join("grid.csv")).unwrap();
    assert_eq!(g.header, vec!["x", "y", "density"]);
    assert_eq!(g.data.nrows(), 48 * 48);
    let best = g
        .data
        .rows()
        .into_iter()
        .max_by(|a, b| a[2].total_cmp(&b[2]))
        .unwrap();
    let h = 24.0 / 48.0;
    assert!((best[0] + 3.0).abs() <= h && (best[1] - 3.0).abs() <= h, "{best:?}");
    let mass: f64 = g.data.column(2).iter().map(|d| d * h * h).sum();
    assert!(mass <= 1.0 + 1e-6 && mass > 0.95, "{mass}");
}

#[test]
fn marginal_grid_for_3d_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let body = r#"
benchmark = "model-nongauss-3"
seed = 1
train.n_train = 600
train.steps = 3
train.batch_size = 64
flow.n_layers = 3
flow.hidden_dims = [4]
grid.resolution = 10
grid.n_samples = 5000
"#;
    let cfg = write_config(d, "c.toml", body);
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    let gcfg = write_config(
        d,
        "g.toml",
        &format!("grid.resolution = 10\ngrid.n_samples = 5000\nmodel = {:?}\n", d.join("model.wflow").to_str().unwrap()),
    );
    run_ok(&["grid", "--config", gcfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    let g = read_csv(&d.join("grid.csv")).unwrap();
    assert_eq!(g.header, vec!["axis_i", "axis_j", "x", "y", "marginal"]);
    assert_eq!(g.data.nrows(), 3 * 100);
    let cell = 2.4 * 2.4;
    for pair in 0..3 {
        let mass: f64 = g.data.rows().into_iter().skip(pair * 100).take(100).map(|r| r[4] * cell).sum();
        assert!(mass <= 1.0 + 1e-9, "{mass}");
    }
}

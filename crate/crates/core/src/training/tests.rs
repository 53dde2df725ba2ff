use super::*;
use crate::distributions::quadrature::trapezoid_box;
use crate::distributions::GaussianMixture;
use crate::flow::simplex_base;
use approx::assert_relative_eq;
use ndarray::array;

fn small_cfg(dim: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default_for(dim);
    cfg.steps = 30;
    cfg.batch_size = 64;
    cfg.n_train = 512;
    cfg.flow.n_layers = 4;
    cfg.flow.hidden_dims = vec![8];
    cfg
}

fn gmm_2d() -> TargetDensity {
    let cov = [2.0, 0.8, 0.8, 1.5];
    TargetDensity::Gmm(GaussianMixture::equal_shared_covariance(&[vec![-3.0, 3.0]], &cov).unwrap())
}

#[test]
fn percentile_example_collapses_to_zero() {
    let w = [0.0, 0.0, 0.0, 10.0];
    assert_eq!(nearest_rank_percentile(&w, 75.0), 0.0);
    let mut cfg = TrainConfig::default();
    cfg.clip_percentile = Some(75.0);
    assert!(matches!(preprocess_weights(&w, &cfg), Err(Error::DegenerateDataset(_))));
    cfg.clip_percentile = None;
    assert_eq!(preprocess_weights(&w, &cfg).unwrap(), vec![0.0, 0.0, 0.0, 4.0]);
}

#[test]
fn nearest_rank_matches_definition() {
    let v: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(nearest_rank_percentile(&v, 100.0), 10.0);
    assert_eq!(nearest_rank_percentile(&v, 50.0), 5.0);
    assert_eq!(nearest_rank_percentile(&v, 51.0), 6.0);
    assert_eq!(nearest_rank_percentile(&v, 0.1), 1.0);
}

#[test]
fn mean_one_normalization_and_scale_invariance() {
    let w = [0.5, 2.0, 1.5, 0.0, 6.0];
    let cfg = TrainConfig {
        clip_percentile: Some(80.0),
        ..TrainConfig::default()
    };
    let a = preprocess_weights(&w, &cfg).unwrap();
    assert_relative_eq!(a.iter().sum::<f64>() / a.len() as f64, 1.0, epsilon = 1e-15);
    assert!(a[4] <= a[1] + 1e-15);
    let scaled: Vec<f64> = w.iter().map(|x| x * 1e6).collect();
    let b = preprocess_weights(&scaled, &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_relative_eq!(x, y, max_relative = 1e-12);
    }
}

#[test]
fn rejects_bad_weights() {
    let cfg = TrainConfig::default();
    assert!(preprocess_weights(&[], &cfg).is_err());
    assert!(preprocess_weights(&[1.0, -1.0], &cfg).is_err());
    assert!(preprocess_weights(&[1.0, f64::NAN], &cfg).is_err());
    assert!(preprocess_weights(&[0.0, 0.0], &cfg).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let mut c = TrainConfig::default();
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.learning_rate = -1.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.clip_percentile = Some(120.0);
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.adam_betas = (1.0, 0.9);
    assert!(c.validate().is_err());
}

#[test]
fn dataset_weights_are_likelihood_values() {
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let target = gmm_2d();
    let ds = generate_dataset(&prior, &target, 100, 7).unwrap();
    assert_eq!(ds.len(), 100);
    for (row, w) in ds.thetas().rows().into_iter().zip(ds.weights()) {
        assert!(prior.contains(row.as_slice().unwrap()));
        assert_eq!(*w, target.log_prob(row.as_slice().unwrap()).exp());
    }
    let again = generate_dataset(&prior, &target, 100, 7).unwrap();
    assert_eq!(ds, again);
}

#[test]
fn mean_weight_matches_box_mass_fraction() {
    // E_prior[L] = (mass of L inside the box) / volume.
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let target = gmm_2d();
    let mass = trapezoid_box(|x| target.log_prob(x).exp(), prior.lower(), prior.upper(), 801);
    let expected = mass / prior.log_volume().exp();
    let ds = generate_dataset(&prior, &target, 200_000, 3).unwrap();
    let w = ds.weights();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - expected).abs() < 4.0 * (var / n).sqrt(), "{mean} vs {expected}");
}

#[test]
fn zero_steps_returns_initial_model() {
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let ds = generate_dataset(&prior, &gmm_2d(), 256, 1).unwrap();
    let mut cfg = small_cfg(2);
    cfg.steps = 0;
    let model = FlowModel::build(2, &cfg.flow, simplex_base(2, 1, 5.0).unwrap(), 0).unwrap();
    let (out, trace) = train(&model, &ds, &cfg).unwrap();
    assert_eq!(out, model);
    assert!(trace.losses.is_empty());
    assert_eq!(trace.params_hash, params_hash(&model.params_flat()));
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let ds = generate_dataset(&prior, &gmm_2d(), 512, 1).unwrap();
    let mut cfg = small_cfg(2);
    cfg.steps = 200;
    cfg.learning_rate = 5e-3;
    let model = FlowModel::build(2, &cfg.flow, simplex_base(2, 1, 5.0).unwrap(), 4).unwrap();
    let w = preprocess_weights(ds.weights(), &cfg).unwrap();
    let before = dataset_loss(&model, ds.thetas(), &w).unwrap();
    let (a, ta) = train(&model, &ds, &cfg).unwrap();
    let (b, tb) = train(&model, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.losses, tb.losses);
    assert_eq!(ta.params_hash, tb.params_hash);
    assert_eq!(ta.losses.len(), 200);
    let after = dataset_loss(&a, ds.thetas(), &w).unwrap();
    assert!(after < before - 0.1, "{before} -> {after}");
}

#[test]
fn dataset_loss_at_identity_is_base_nll() {
    let cfg = small_cfg(2);
    let model = FlowModel::build(2, &cfg.flow, simplex_base(2, 1, 5.0).unwrap(), 0).unwrap();
    let thetas = array![[0.0, 0.0], [1.0, -2.0]];
    let w = [1.0, 3.0];
    let base = GaussianMixture::standard_normal(2);
    let expected = -(base.log_prob(&[0.0, 0.0]) + 3.0 * base.log_prob(&[1.0, -2.0])) / 2.0;
    assert_relative_eq!(dataset_loss(&model, &thetas, &w).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn dimension_and_batch_mismatch_rejected() {
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let ds = generate_dataset(&prior, &gmm_2d(), 32, 1).unwrap();
    let cfg = small_cfg(3);
    let model = FlowModel::build(3, &cfg.flow, simplex_base(3, 1, 5.0).unwrap(), 0).unwrap();
    assert!(matches!(train(&model, &ds, &cfg), Err(Error::DimensionMismatch { .. })));
    let cfg = small_cfg(2);
    let model = FlowModel::build(2, &cfg.flow, simplex_base(2, 1, 5.0).unwrap(), 0).unwrap();
    assert!(matches!(train(&model, &ds, &cfg), Err(Error::Config(_))));
}

#[test]
fn cosine_schedule_endpoints() {
    let s = LrSchedule::Cosine;
    assert_eq!(s.factor(0, 100), 1.0);
    assert_relative_eq!(s.factor(50, 100), 0.5, epsilon = 1e-15);
    assert!(s.factor(99, 100) < 1e-3);
    assert!((1..100).all(|t| s.factor(t, 100) < s.factor(t - 1, 100)));
    assert_eq!(LrSchedule::Constant.factor(77, 100), 1.0);
}

#[test]
fn constant_schedule_differs_from_cosine() {
    let prior = UniformBox::symmetric(2, 12.0).unwrap();
    let data = generate_dataset(&prior, &gmm_2d(), 2000, 3).unwrap();
    let mut cfg = small_cfg(2);
    let init = FlowModel::build(2, &cfg.flow, simplex_base(2, 1, 5.0).unwrap(), 1).unwrap();
    let (_, a) = train(&init, &data, &cfg).unwrap();
    cfg.lr_schedule = LrSchedule::Constant;
    let (_, b) = train(&init, &data, &cfg).unwrap();
    assert_eq!(a.losses[..2], b.losses[..2]);
    assert_ne!(a.params_hash, b.params_hash);
}

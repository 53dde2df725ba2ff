//! Sample-based discrepancy measures between a trained flow and its target.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::TargetDensity;
use crate::flow::FlowModel;
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_N_EVAL: usize = 200_000;
pub const DEFAULT_N_PROJ: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Target draws at which the model density was not finite.
    pub n_nonfinite: usize,
}

/// Monte-Carlo forward KL `D(p ‖ q)` from `n` target draws.
pub fn kl_mc(target: &TargetDensity, model: &FlowModel, n: usize, seed: u64) -> Result<KlEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("kl_mc needs n >= 1".into()));
    }
    if target.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "kl target vs model",
            expected: target.dim(),
            got: model.dim(),
        });
    }
    let x = target.sample(n, seed);
    kl_from_samples(target, model, x.view())
}

/// Forward KL estimate on supplied target draws.
pub fn kl_from_samples(target: &TargetDensity, model: &FlowModel, x: ArrayView2<'_, f64>) -> Result<KlEstimate> {
    let n = x.nrows();
    let lq = model.log_prob_batch_lossy(x)?;
    let mut diffs = Vec::with_capacity(n);
    let mut n_nonfinite = 0;
    for (row, q) in x.rows().into_iter().zip(lq) {
        let p = target.log_prob(&row.to_vec());
        let d = p - q;
        if d.is_finite() {
            diffs.push(d);
        } else {
            n_nonfinite += 1;
        }
    }
    if n_nonfinite > 0 {
        return Ok(KlEstimate {
            value: f64::INFINITY,
            stderr: f64::NAN,
            n_nonfinite,
        });
    }
    let (mean, var) = mean_var(&diffs);
    Ok(KlEstimate {
        value: mean,
        stderr: (var / n as f64).sqrt(),
        n_nonfinite,
    })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Exact empirical W₁ between two equal-size samples (order statistics).
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("w1_1d on empty sample".into()));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "w1_1d sample sizes",
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    if a.iter().chain(&b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("w1_1d on NaN sample".into()));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Subsamples the larger input without replacement to the smaller size, then applies [`w1_1d`].
pub fn w1_1d_resampled(a: &[f64], b: &[f64], seed: u64) -> Result<f64> {
    let m = a.len().min(b.len());
    if m == 0 {
        return Err(Error::InvalidArgument("w1_1d on empty sample".into()));
    }
    let mut r = rng::seeded(seed);
    let pick = |v: &[f64], r: &mut rng::StreamRng| -> Vec<f64> {
        if v.len() == m {
            v.to_vec()
        } else {
            sample_indices(r, v.len(), m).into_iter().map(|i| v[i]).collect()
        }
    };
    let a = pick(a, &mut r);
    let b = pick(b, &mut r);
    w1_1d(&a, &b)
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            context: "sample dimensions",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sample sizes",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(())
}

/// Mean over coordinates of the marginal W₁.
pub fn w1_marginal_avg(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&a, &b)?;
    let d = a.ncols();
    let mut total = 0.0;
    for j in 0..d {
        total += w1_1d(&a.column(j).to_vec(), &b.column(j).to_vec())?;
    }
    Ok(total / d as f64)
}

/// Per-coordinate marginal W₁.
pub fn w1_marginals(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_pair(&a, &b)?;
    (0..a.ncols())
        .map(|j| w1_1d(&a.column(j).to_vec(), &b.column(j).to_vec()))
        .collect()
}

/// `n_proj` directions drawn uniformly on the unit sphere.
pub fn random_directions(dim: usize, n_proj: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    let mut dirs = Array2::<f64>::zeros((n_proj, dim));
    for mut row in dirs.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut r);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    dirs
}

/// Sliced W₁ averaged over seeded random directions.
pub fn w1_sliced(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, n_proj: usize, seed: u64) -> Result<f64> {
    check_pair(&a, &b)?;
    if n_proj == 0 {
        return Err(Error::InvalidArgument("w1_sliced needs n_proj >= 1".into()));
    }
    let dirs = random_directions(a.ncols(), n_proj, seed);
    let pa = a.dot(&dirs.t());
    let pb = b.dot(&dirs.t());
    let mut total = 0.0;
    for k in 0..n_proj {
        total += w1_1d(&pa.column(k).to_vec(), &pb.column(k).to_vec())?;
    }
    Ok(total / n_proj as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippingInfo {
    pub percentile: Option<f64>,
    pub n_clipped: usize,
}

/// Per-run evaluation summary written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kl: f64,
    pub w1_marginal_avg: f64,
    pub w1_sliced: f64,
    pub n_eval: usize,
    pub n_projections: usize,
    pub seed: u64,
    pub config_hash: String,
    pub kl_stderr: f64,
    pub kl_nonfinite: usize,
    pub w1_marginals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipping: Option<ClippingInfo>,
}

pub struct EvalSamples {
    pub target: Array2<f64>,
    pub model: Array2<f64>,
    pub model_log_q: Array1<f64>,
}

/// Computes all three metrics. Returns the report and the drawn samples.
pub fn evaluate(
    target: &TargetDensity,
    model: &FlowModel,
    n_eval: usize,
    n_proj: usize,
    seed: u64,
) -> Result<(MetricsReport, EvalSamples)> {
    if n_eval == 0 || n_proj == 0 {
        return Err(Error::InvalidArgument("n_eval and n_projections must be >= 1".into()));
    }
    let xt = target.sample(n_eval, rng::derive_seed(seed, "eval.target"));
    let kl = kl_from_samples(target, model, xt.view())?;
    let (xm, log_q) = model.sample_with_log_prob(n_eval, rng::derive_seed(seed, "eval.model"))?;
    let w1m = w1_marginals(xt.view(), xm.view())?;
    let w1_avg = w1m.iter().sum::<f64>() / w1m.len() as f64;
    let ws = w1_sliced(xt.view(), xm.view(), n_proj, rng::derive_seed(seed, "eval.proj"))?;
    let report = MetricsReport {
        kl: kl.value,
        w1_marginal_avg: w1_avg,
        w1_sliced: ws,
        n_eval,
        n_projections: n_proj,
        seed,
        config_hash: String::new(),
        kl_stderr: kl.stderr,
        kl_nonfinite: kl.n_nonfinite,
        w1_marginals: w1m,
        final_loss: None,
        architecture: None,
        clipping: None,
    };
    Ok((
        report,
        EvalSamples {
            target: xt,
            model: xm,
            model_log_q: log_q,
        },
    ))
}

/// Median of the finite entries; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::GaussianMixture;
    use crate::flow::FlowConfig;
    use approx::assert_relative_eq;
    use ndarray::Axis;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
        fn permute(k: usize, p: &mut Vec<usize>, a: &[f64], b: &[f64], best: &mut f64) {
            if k == p.len() {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum();
                *best = best.min(c);
                return;
            }
            for i in k..p.len() {
                p.swap(k, i);
                permute(k + 1, p, a, b, best);
                p.swap(k, i);
            }
        }
        let mut p: Vec<usize> = (0..a.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut p, a, b, &mut best);
        best / a.len() as f64
    }

    fn identity_model(base: GaussianMixture) -> FlowModel {
        FlowModel::new(base.dim(), Vec::new(), base).unwrap()
    }

    #[test]
    fn w1_matches_brute_force_assignment() {
        let mut r = rng::seeded(11);
        for m in 1..=6 {
            for _ in 0..50 {
                let a: Vec<f64> = (0..m).map(|_| r.random_range(-5.0..5.0)).collect();
                let b: Vec<f64> = (0..m).map(|_| r.random_range(-5.0..5.0)).collect();
                let got = w1_1d(&a, &b).unwrap();
                assert_relative_eq!(got, brute_force_w1(&a, &b), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn w1_trivial_cases() {
        let a = [3.0, -1.0, 2.5, 0.0];
        assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x - 1.75).collect();
        assert_relative_eq!(w1_1d(&a, &b).unwrap(), 1.75, epsilon = 1e-15);
        assert!(w1_1d(&[], &[]).is_err());
        assert!(w1_1d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn resampled_w1_handles_unequal_sizes() {
        let a: Vec<f64> = (0..100).map(f64::from).collect();
        let b: Vec<f64> = (0..40).map(|i| f64::from(i) * 2.5).collect();
        let v = w1_1d_resampled(&a, &b, 3).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        assert_eq!(v, w1_1d_resampled(&a, &b, 3).unwrap());
    }

    #[test]
    fn marginal_avg_shift() {
        let a = Array2::from_shape_fn((50, 2), |(i, j)| (i * 7 + j * 3) as f64 % 11.0);
        let mut b = a.clone();
        b.column_mut(0).mapv_inplace(|v| v + 1.0);
        b.column_mut(1).mapv_inplace(|v| v + 3.0);
        assert_eq!(w1_marginal_avg(a.view(), a.view()).unwrap(), 0.0);
        assert_relative_eq!(w1_marginal_avg(a.view(), b.view()).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sliced_shift_expectation() {
        let a = Array2::from_shape_fn((64, 2), |(i, j)| ((i * 13 + j * 5) % 17) as f64 * 0.3);
        let mut b = a.clone();
        b.column_mut(0).mapv_inplace(|v| v + 1.0);
        let v = w1_sliced(a.view(), b.view(), 10_000, 5).unwrap();
        assert!((v - 2.0 / std::f64::consts::PI).abs() <= 0.02, "{v}");
        assert!(v <= 1.0);
        assert_eq!(w1_sliced(a.view(), a.view(), 16, 1).unwrap(), 0.0);
    }

    #[test]
    fn sliced_single_projection_is_1d_w1() {
        let mut r = rng::seeded(2);
        let a = Array2::from_shape_fn((30, 3), |_| r.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((30, 3), |_| r.random_range(-1.0..2.0));
        let u = random_directions(3, 1, 9);
        let pa: Vec<f64> = a.dot(&u.row(0)).to_vec();
        let pb: Vec<f64> = b.dot(&u.row(0)).to_vec();
        let expected = w1_1d(&pa, &pb).unwrap();
        assert_relative_eq!(w1_sliced(a.view(), b.view(), 1, 9).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn directions_are_unit() {
        let d = random_directions(3, 200, 4);
        for row in d.rows() {
            assert_relative_eq!(row.dot(&row), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_of_shifted_unit_gaussians() {
        let unit = |m: f64| GaussianMixture::equal_shared_covariance(&[vec![m]], &[1.0]).unwrap();
        let p = TargetDensity::Gmm(unit(0.0));
        let q = identity_model(unit(1.0));
        let est = kl_mc(&p, &q, 1_000_000, 17).unwrap();
        assert!((est.value - 0.5).abs() <= 0.01, "{:?}", est);
    }

    #[test]
    fn kl_of_identical_pair_is_zero() {
        let base = GaussianMixture::equal_shared_covariance(&[vec![-2.0, 1.0], vec![3.0, 0.0]], &[1.0, 0.2, 0.2, 0.7]).unwrap();
        let p = TargetDensity::Gmm(base.clone());
        let q = identity_model(base);
        let est = kl_mc(&p, &q, 20_000, 1).unwrap();
        assert!(est.value.abs() <= 3.0 * est.stderr + 1e-12, "{:?}", est);
    }

    #[test]
    fn kl_stderr_shrinks_with_n() {
        let p = TargetDensity::Gmm(GaussianMixture::standard_normal(2));
        let q = identity_model(GaussianMixture::equal_shared_covariance(&[vec![0.5, 0.0]], &[1.5, 0.0, 0.0, 1.5]).unwrap());
        let small = kl_mc(&p, &q, 10_000, 3).unwrap();
        let large = kl_mc(&p, &q, 160_000, 3).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn evaluate_fills_report() {
        let base = GaussianMixture::standard_normal(2);
        let p = TargetDensity::Gmm(base.clone());
        let model = FlowModel::build(2, &FlowConfig { n_layers: 2, hidden_dims: vec![4], ..FlowConfig::default_for(2) }, base, 0).unwrap();
        let (rep, s) = evaluate(&p, &model, 5000, 8, 0).unwrap();
        assert_eq!(rep.n_eval, 5000);
        assert_eq!(rep.n_projections, 8);
        assert_eq!(s.model.nrows(), 5000);
        assert!(rep.kl.abs() < 0.01);
        assert!(rep.w1_marginal_avg < 0.05 && rep.w1_sliced < 0.05);
        let (again, _) = evaluate(&p, &model, 5000, 8, 0).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN, 5.0]), Some(5.0));
    }

    fn vecs(m: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, m)
    }

    proptest! {
        #[test]
        fn w1_is_a_metric((a, b, c) in (1usize..40).prop_flat_map(|m| (vecs(m), vecs(m), vecs(m)))) {
            let ab = w1_1d(&a, &b).unwrap();
            let ba = w1_1d(&b, &a).unwrap();
            let ac = w1_1d(&a, &c).unwrap();
            let cb = w1_1d(&c, &b).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert!(ab <= ac + cb + 1e-9);
            prop_assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            prop_assert_eq!(ab == 0.0, sa == sb);
        }

        #[test]
        fn metrics_invariant_under_row_permutation(seed in 0u64..1000, n in 2usize..30) {
            let mut r = rng::seeded(seed);
            let a = Array2::from_shape_fn((n, 2), |_| r.random_range(-3.0..3.0));
            let b = Array2::from_shape_fn((n, 2), |_| r.random_range(-3.0..3.0));
            let perm: Vec<usize> = sample_indices(&mut r, n, n).into_vec();
            let pa = a.select(Axis(0), &perm);
            let pb = b.select(Axis(0), &perm);
            let m0 = w1_marginal_avg(a.view(), b.view()).unwrap();
            let m1 = w1_marginal_avg(pa.view(), pb.view()).unwrap();
            prop_assert!((m0 - m1).abs() <= 1e-12);
            let s0 = w1_sliced(a.view(), b.view(), 8, seed).unwrap();
            let s1 = w1_sliced(pa.view(), pb.view(), 8, seed).unwrap();
            prop_assert!((s0 - s1).abs() <= 1e-12);
        }

        #[test]
        fn sliced_bounded_by_shift_norm(v0 in -3.0f64..3.0, v1 in -3.0f64..3.0, seed in 0u64..100) {
            let a = Array2::from_shape_fn((20, 2), |(i, j)| ((i * 3 + j) % 7) as f64);
            let mut b = a.clone();
            b.column_mut(0).mapv_inplace(|x| x + v0);
            b.column_mut(1).mapv_inplace(|x| x + v1);
            let s = w1_sliced(a.view(), b.view(), 16, seed).unwrap();
            prop_assert!(s <= (v0 * v0 + v1 * v1).sqrt() + 1e-9);
        }
    }
}

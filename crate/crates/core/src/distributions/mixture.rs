use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::log_sum_exp;
use crate::linalg;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

/// One multivariate normal with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ComponentRepr", into = "ComponentRepr")]
pub struct GaussianComponent {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// `covariance` is row-major `d*d`.
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("gaussian of dimension 0".into()));
        }
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                context: "covariance",
                expected: d * d,
                got: covariance.len(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let chol = linalg::cholesky(&covariance, d)
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        let log_det_half: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
        let log_norm = -0.5 * d as f64 * LN_2PI - log_det_half;
        Ok(Self {
            mean,
            covariance,
            chol,
            log_norm,
        })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = variance;
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn cholesky(&self) -> &[f64] {
        &self.chol
    }

    /// Whitened residual `L⁻¹(x − μ)`.
    fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        linalg::solve_lower(&self.chol, self.dim(), &mut r);
        r
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let r = self.whiten(x);
        self.log_norm - 0.5 * r.iter().map(|v| v * v).sum::<f64>()
    }

    /// Log-density and `Σ⁻¹(x − μ)` (the negated score).
    fn log_prob_and_precision_residual(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut r = self.whiten(x);
        let lp = self.log_norm - 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        linalg::solve_lower_transpose(&self.chol, self.dim(), &mut r);
        (lp, r)
    }

    fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let shifted = linalg::lower_mul(&self.chol, self.dim(), &eps);
        for ((o, m), s) in out.iter_mut().zip(&self.mean).zip(shifted) {
            *o = m + s;
        }
    }
}

impl TryFrom<ComponentRepr> for GaussianComponent {
    type Error = Error;

    fn try_from(r: ComponentRepr) -> Result<Self> {
        let d = r.mean.len();
        if r.covariance.len() != d || r.covariance.iter().any(|row| row.len() != d) {
            return Err(Error::Format("covariance rows do not match mean".into()));
        }
        Self::new(r.mean, r.covariance.concat())
    }
}

impl From<GaussianComponent> for ComponentRepr {
    fn from(c: GaussianComponent) -> Self {
        let d = c.dim();
        Self {
            covariance: c.covariance.chunks(d).map(<[f64]>::to_vec).collect(),
            mean: c.mean,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

/// Finite mixture of multivariate normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        };
        let d = first.dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidArgument("mixture components differ in dimension".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch {
                context: "mixture weights",
                expected: components.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            components,
            weights,
            log_weights,
        })
    }

    /// Equally weighted mixture.
    pub fn equal(components: Vec<GaussianComponent>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    /// Equal mixture of components sharing one covariance.
    pub fn equal_shared_covariance(means: &[Vec<f64>], covariance: &[f64]) -> Result<Self> {
        let comps = means
            .iter()
            .map(|m| GaussianComponent::new(m.clone(), covariance.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::equal(comps)
    }

    pub fn standard_normal(d: usize) -> Self {
        Self::new(
            vec![GaussianComponent::isotropic(vec![0.0; d], 1.0).expect("identity is SPD")],
            vec![1.0],
        )
        .expect("single component")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_prob(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Log-density plus its gradient with respect to `x`, written into `grad`.
    pub fn log_prob_with_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.components.len();
        let mut terms = Vec::with_capacity(k);
        let mut residuals = Vec::with_capacity(k);
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            let (lp, r) = c.log_prob_and_precision_residual(x);
            terms.push(lw + lp);
            residuals.push(r);
        }
        let total = log_sum_exp(&terms);
        grad.fill(0.0);
        for (t, r) in terms.iter().zip(&residuals) {
            let resp = (t - total).exp();
            for (g, v) in grad.iter_mut().zip(r) {
                *g -= resp * v;
            }
        }
        total
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        self.sample_with(&mut rng::seeded(seed), n)
    }

    /// Draws `n` rows: component by weight, then `μ + L ε`.
    pub fn sample_with(&self, rng: &mut StreamRng, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = self.pick_component(rng);
            self.components[k].sample_into(rng, row.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn pick_component(&self, rng: &mut StreamRng) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = Error;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        Self::new(r.components, r.weights)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(m: GaussianMixture) -> Self {
        Self {
            weights: m.weights,
            components: m.components,
        }
    }
}

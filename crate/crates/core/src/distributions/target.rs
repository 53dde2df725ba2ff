use ndarray::Array2;
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quadrature, AxisDensity, GaussianMixture, UniformBox};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Product of independent one-dimensional densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonGaussProduct {
    axes: Vec<AxisDensity>,
}

impl NonGaussProduct {
    pub fn new(axes: Vec<AxisDensity>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("product density needs at least one axis".into()));
        }
        for a in &axes {
            a.validate()?;
        }
        Ok(Self { axes })
    }

    /// Three-mode 3D target: Laplace mixture at {-6, 0, 6} (scale 0.8) on axis 0,
    /// logistic(5, 0.7) on axis 1, Gumbel(0, 1) on axis 2.
    pub fn three_mode() -> Self {
        Self::new(vec![
            AxisDensity::LaplaceMixture {
                locations: vec![-6.0, 0.0, 6.0],
                scales: vec![0.8; 3],
            },
            AxisDensity::Logistic { location: 5.0, scale: 0.7 },
            AxisDensity::Gumbel { location: 0.0, scale: 1.0 },
        ])
        .expect("valid axes")
    }

    pub fn axes(&self) -> &[AxisDensity] {
        &self.axes
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.axes.iter().zip(x).map(|(a, &v)| a.log_pdf(v)).sum()
    }

    fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.axes) {
            let u: f64 = rng.sample(Open01);
            let pick: f64 = rng.random();
            *o = a.quantile(u, pick);
        }
    }
}

/// Ground-truth posterior used to weight prior draws and to score models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum TargetDensity {
    Gmm(GaussianMixture),
    NonGaussProduct(NonGaussProduct),
    /// Flat density on a box; gives constant likelihood weights.
    Uniform(UniformBox),
}

impl TargetDensity {
    pub fn dim(&self) -> usize {
        match self {
            TargetDensity::Gmm(m) => m.dim(),
            TargetDensity::NonGaussProduct(p) => p.axes.len(),
            TargetDensity::Uniform(b) => b.dim(),
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        match self {
            TargetDensity::Gmm(m) => m.log_prob(x),
            TargetDensity::NonGaussProduct(p) => p.log_prob(x),
            TargetDensity::Uniform(b) => b.log_prob(x),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        self.sample_with(&mut rng::seeded(seed), n)
    }

    pub fn sample_with(&self, rng: &mut StreamRng, n: usize) -> Array2<f64> {
        match self {
            TargetDensity::Gmm(m) => m.sample_with(rng, n),
            TargetDensity::Uniform(b) => b.sample_with(rng, n),
            TargetDensity::NonGaussProduct(p) => {
                let mut out = Array2::zeros((n, p.axes.len()));
                for mut row in out.rows_mut() {
                    p.sample_into(rng, row.as_slice_mut().expect("standard layout"));
                }
                out
            }
        }
    }

    /// Box holding all but a negligible fraction of the mass.
    pub fn covering_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            TargetDensity::Gmm(m) => {
                let d = m.dim();
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for c in m.components() {
                    for j in 0..d {
                        let sd = c.covariance()[j * d + j].sqrt();
                        lo[j] = lo[j].min(c.mean()[j] - 8.0 * sd);
                        hi[j] = hi[j].max(c.mean()[j] + 8.0 * sd);
                    }
                }
                (lo, hi)
            }
            TargetDensity::NonGaussProduct(p) => p.axes.iter().map(AxisDensity::covering_interval).unzip(),
            TargetDensity::Uniform(b) => (b.lower().to_vec(), b.upper().to_vec()),
        }
    }

    /// Numerical integral of the density, for `d <= 3`.
    pub fn normalization(&self) -> Result<f64> {
        let d = self.dim();
        if d > 3 {
            return Err(Error::InvalidArgument("normalization check supports d <= 3".into()));
        }
        Ok(match self {
            // Separable: integrate each axis on its own with the kinks as breakpoints.
            TargetDensity::NonGaussProduct(p) => p
                .axes
                .iter()
                .map(|a| {
                    let (lo, hi) = a.covering_interval();
                    let breaks = match a {
                        AxisDensity::LaplaceMixture { locations, .. } => locations.clone(),
                        _ => Vec::new(),
                    };
                    quadrature::integrate_1d(|x| a.log_pdf(x).exp(), lo, hi, &breaks, 200, 8)
                })
                .product(),
            _ => {
                let (lo, hi) = self.covering_box();
                let m = match d {
                    1 => 2001,
                    2 => 301,
                    _ => 121,
                };
                quadrature::trapezoid_box(|x| self.log_prob(x).exp(), &lo, &hi, m)
            }
        })
    }

    /// Fails unless the density integrates to 1 within 1%.
    pub fn check_normalization(&self) -> Result<()> {
        let z = self.normalization()?;
        if (z - 1.0).abs() > 0.01 {
            return Err(Error::InvalidArgument(format!(
                "target density integrates to {z}, not 1"
            )));
        }
        Ok(())
    }
}

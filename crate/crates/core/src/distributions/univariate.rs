//! One-dimensional densities used as axes of the non-Gaussian product target.

use serde::{Deserialize, Serialize};

use super::log_sum_exp;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxisDensity {
    /// Equal-weight mixture of Laplace distributions.
    LaplaceMixture { locations: Vec<f64>, scales: Vec<f64> },
    Logistic { location: f64, scale: f64 },
    Gumbel { location: f64, scale: f64 },
}

impl AxisDensity {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            AxisDensity::LaplaceMixture { locations, scales } => {
                !locations.is_empty()
                    && locations.len() == scales.len()
                    && scales.iter().all(|s| *s > 0.0)
                    && locations.iter().all(|l| l.is_finite())
            }
            AxisDensity::Logistic { location, scale } | AxisDensity::Gumbel { location, scale } => {
                *scale > 0.0 && location.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid axis density {self:?}")))
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match self {
            AxisDensity::LaplaceMixture { locations, scales } => {
                let lw = -(locations.len() as f64).ln();
                let terms: Vec<f64> = locations
                    .iter()
                    .zip(scales)
                    .map(|(l, b)| lw - (2.0 * b).ln() - (x - l).abs() / b)
                    .collect();
                log_sum_exp(&terms)
            }
            AxisDensity::Logistic { location, scale } => {
                let z = (x - location) / scale;
                // -z - 2 log(1 + e^{-z}), written symmetric in z for stability
                -z.abs() - 2.0 * (-z.abs()).exp().ln_1p() - scale.ln()
            }
            AxisDensity::Gumbel { location, scale } => {
                let z = (x - location) / scale;
                -scale.ln() - z - (-z).exp()
            }
        }
    }

    /// Inverse-CDF draw. `u` in (0, 1) selects the quantile; `pick` in [0, 1)
    /// selects the mixture component and is ignored by single-component axes.
    pub fn quantile(&self, u: f64, pick: f64) -> f64 {
        match self {
            AxisDensity::LaplaceMixture { locations, scales } => {
                let k = ((pick * locations.len() as f64) as usize).min(locations.len() - 1);
                let (l, b) = (locations[k], scales[k]);
                if u < 0.5 {
                    l + b * (2.0 * u).ln()
                } else {
                    l - b * (2.0 - 2.0 * u).ln()
                }
            }
            AxisDensity::Logistic { location, scale } => location + scale * (u / (1.0 - u)).ln(),
            AxisDensity::Gumbel { location, scale } => location - scale * (-u.ln()).ln(),
        }
    }

    /// An interval holding all but a negligible tail of the mass.
    pub fn covering_interval(&self) -> (f64, f64) {
        match self {
            AxisDensity::LaplaceMixture { locations, scales } => {
                let bmax = scales.iter().copied().fold(0.0, f64::max);
                let lo = locations.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = locations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo - 30.0 * bmax, hi + 30.0 * bmax)
            }
            AxisDensity::Logistic { location, scale } => (location - 35.0 * scale, location + 35.0 * scale),
            AxisDensity::Gumbel { location, scale } => (location - 4.0 * scale, location + 35.0 * scale),
        }
    }

    /// Characteristic width used for quadrature ranges.
    pub fn scale(&self) -> f64 {
        match self {
            AxisDensity::LaplaceMixture { scales, .. } => scales.iter().copied().fold(0.0, f64::max),
            AxisDensity::Logistic { scale, .. } | AxisDensity::Gumbel { scale, .. } => *scale,
        }
    }
}

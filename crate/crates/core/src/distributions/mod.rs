//! Base distributions, priors and analytic target densities.
//!
//! Every density here is normalized and evaluated in log space. A point outside
//! the support gets `f64::NEG_INFINITY`; no density ever returns NaN for finite
//! input.

mod mixture;
pub mod quadrature;
mod target;
mod uniform;
mod univariate;

pub use mixture::{GaussianComponent, GaussianMixture};
pub use target::{NonGaussProduct, TargetDensity};
pub use uniform::UniformBox;
pub use univariate::AxisDensity;

/// `log Σ exp(xᵢ)`, stable for large magnitudes. Empty or all `-∞` input gives `-∞`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_edges() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, f64::NEG_INFINITY]) + 1000.0).abs() < 1e-12);
    }
}

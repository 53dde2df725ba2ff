use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Axis-aligned box with the uniform density on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct UniformBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl UniformBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidArgument("box bounds must be non-empty and equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidArgument("box needs finite lower < upper on every axis".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[-half_width, half_width]^d`.
    pub fn symmetric(d: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; d], vec![half_width; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn log_volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).ln()).sum()
    }

    /// `-log(volume)` inside (boundary included), `-∞` outside.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        if self.contains(x) {
            -self.log_volume()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        self.sample_with(&mut rng::seeded(seed), n)
    }

    pub fn sample_with(&self, rng: &mut StreamRng, n: usize) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((n, d), |(_, j)| rng.random_range(self.lower[j]..self.upper[j]))
    }
}

impl TryFrom<BoxRepr> for UniformBox {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        Self::new(r.lower, r.upper)
    }
}

impl From<UniformBox> for BoxRepr {
    fn from(b: UniformBox) -> Self {
        Self {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

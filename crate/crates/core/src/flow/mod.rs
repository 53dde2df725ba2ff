//! RealNVP flow: a stack of affine coupling layers over a Gaussian-mixture base.
//!
//! The flow maps latent `z` to parameters `θ = f(z)`. Densities are evaluated by
//! running the layers inverted in reverse order:
//! `log q(θ) = log p_Z(f⁻¹(θ)) + Σ log|det ∂f⁻¹/∂θ|`.

mod coupling;
mod format;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use coupling::CouplingLayer;
pub use format::{read_model, write_model, MODEL_MAGIC};

use crate::diffnet::{self, Activation, InitScheme, MlpSpec, ParamSlice};
use crate::distributions::{GaussianComponent, GaussianMixture};
use crate::rng;
use crate::{Error, Result};

/// Rows per work unit when evaluating densities or samples.
const EVAL_CHUNK: usize = 2048;
/// Rows per work unit in the gradient; partial results are reduced in chunk order.
const GRAD_CHUNK: usize = 128;

/// Architecture of the coupling stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub scale_clamp: f64,
    pub init: InitScheme,
}

impl FlowConfig {
    /// 12 layers for `d = 2`, 16 for `d >= 3`; two hidden layers of 32 tanh units.
    pub fn default_for(dim: usize) -> Self {
        Self {
            n_layers: if dim <= 2 { 12 } else { 16 },
            hidden_dims: vec![32, 32],
            activation: Activation::Tanh,
            scale_clamp: 3.0,
            init: InitScheme::ZeroLastLayer,
        }
    }
}

/// Pass-through masks for `n_layers` layers in dimension `dim`.
///
/// `d = 2` alternates `[1,0]`, `[0,1]`; `d = 3` cycles `[1,1,0]`, `[1,0,1]`,
/// `[0,1,1]`; larger `d` alternates even/odd coordinates.
pub fn default_masks(dim: usize, n_layers: usize) -> Result<Vec<Vec<bool>>> {
    if n_layers > 0 && dim < 2 {
        return Err(Error::InvalidArgument("coupling layers need dimension >= 2".into()));
    }
    Ok((0..n_layers)
        .map(|i| match dim {
            3 => {
                let free = 2 - (i % 3);
                (0..3).map(|j| j != free).collect()
            }
            _ => (0..dim).map(|j| (j + i) % 2 == 0).collect(),
        })
        .collect())
}

/// Equal-weight, unit-covariance mixture with `modes` means on a regular simplex
/// of circumradius `radius`. One mode sits at the origin; two sit at `±radius`
/// on the first axis; three form a triangle in the first two axes with a vertex
/// on the positive first axis.
pub fn simplex_base(dim: usize, modes: usize, radius: f64) -> Result<GaussianMixture> {
    let means: Vec<Vec<f64>> = match modes {
        1 => vec![vec![0.0; dim]],
        2 => [radius, -radius]
            .iter()
            .map(|&r| {
                let mut m = vec![0.0; dim];
                m[0] = r;
                m
            })
            .collect(),
        3 if dim >= 2 => (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                let mut m = vec![0.0; dim];
                m[0] = radius * a.cos();
                m[1] = radius * a.sin();
                m
            })
            .collect(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "no simplex base with {modes} modes in dimension {dim}"
            )))
        }
    };
    let comps = means
        .into_iter()
        .map(|m| GaussianComponent::isotropic(m, 1.0))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::equal(comps)
}

fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::Instability { detail, .. } => Error::Instability { layer, detail },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
    base: GaussianMixture,
}

impl FlowModel {
    pub fn new(dim: usize, layers: Vec<CouplingLayer>, base: GaussianMixture) -> Result<Self> {
        if base.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "flow base",
                expected: dim,
                got: base.dim(),
            });
        }
        if let Some(l) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::DimensionMismatch {
                context: "coupling layer",
                expected: dim,
                got: l.dim(),
            });
        }
        if !layers.is_empty() {
            let covered = (0..dim).all(|j| layers.iter().any(|l| !l.mask()[j]));
            if !covered {
                return Err(Error::InvalidArgument(
                    "every coordinate must be transformed by some layer".into(),
                ));
            }
        }
        Ok(Self { dim, layers, base })
    }

    /// Fresh flow with default masks and conditioners initialized from `seed`.
    pub fn build(dim: usize, config: &FlowConfig, base: GaussianMixture, seed: u64) -> Result<Self> {
        let masks = default_masks(dim, config.n_layers)?;
        let spec = MlpSpec::new(dim, config.hidden_dims.clone(), dim, config.activation)?;
        let layers = masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| {
                let sp = diffnet::init_params(&spec, rng::derive_seed(seed, &format!("layer{i}.s")), config.init);
                let tp = diffnet::init_params(&spec, rng::derive_seed(seed, &format!("layer{i}.t")), config.init);
                CouplingLayer::new(mask, spec.clone(), spec.clone(), sp, tp, config.scale_clamp)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, layers, base)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_count).sum()
    }

    /// All parameters, layer by layer, `s` net before `t` net.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.s_params().values());
            out.extend_from_slice(l.t_params().values());
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flow parameters",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.s_params().len();
            l.s_params_mut().values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
            let n = l.t_params().len();
            l.t_params_mut().values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Named slices of the flat parameter vector, e.g. `layer3.t.w1`.
    pub fn param_layout(&self) -> Vec<ParamSlice> {
        let mut out = Vec::new();
        let mut off = 0;
        for (i, l) in self.layers.iter().enumerate() {
            for (net, store) in [("s", l.s_params()), ("t", l.t_params())] {
                for sl in store.layout() {
                    out.push(ParamSlice {
                        name: format!("layer{i}.{net}.{}", sl.name),
                        offset: off + sl.offset,
                        shape: sl.shape.clone(),
                    });
                }
                off += store.len();
            }
        }
        out
    }

    fn check_cols(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::DimensionMismatch {
                context: "flow input",
                expected: self.dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// `z → θ` through all layers, with `log|det ∂θ/∂z|` per row.
    pub fn forward_batch(&self, z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_cols(z.ncols())?;
        let mut x = z.to_owned();
        let mut ld = Array1::zeros(z.nrows());
        for (i, layer) in self.layers.iter().enumerate() {
            let (nx, l) = layer.forward_batch(x.view()).map_err(|e| at_layer(e, i))?;
            x = nx;
            ld += &l;
        }
        Ok((x, ld))
    }

    /// `θ → z` through all layers in reverse, with `log|det ∂z/∂θ|` per row.
    pub fn inverse_batch(&self, theta: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_cols(theta.ncols())?;
        let mut z = theta.to_owned();
        let mut ld = Array1::zeros(theta.nrows());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (nz, l) = layer.inverse_batch(z.view()).map_err(|e| at_layer(e, i))?;
            z = nz;
            ld += &l;
        }
        Ok((z, ld))
    }

    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, ld) = self.forward_batch(row(z))?;
        Ok((x.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.inverse_batch(row(theta))?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    /// `log q(θ)` for one point.
    pub fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(row(theta))?[0])
    }

    /// `log q(θ)` for every row; errors if any value is not finite.
    pub fn log_prob_batch(&self, theta: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let out = self.log_prob_batch_lossy(theta)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                layer: self.layers.len(),
                detail: "non-finite log-density".into(),
            });
        }
        Ok(out)
    }

    /// `log q(θ)` for every row. Rows whose inverse pass overflows get `-inf`.
    pub fn log_prob_batch_lossy(&self, theta: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_cols(theta.ncols())?;
        let n = theta.nrows();
        let parts = (0..n.div_ceil(EVAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = theta.slice(s![c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n), ..]);
                match self.inverse_batch(rows) {
                    Ok((z, ld)) => Ok(z
                        .rows()
                        .into_iter()
                        .zip(ld.iter())
                        .map(|(zr, l)| {
                            let v = self.base.log_prob(zr.as_slice().expect("contiguous")) + l;
                            if v.is_nan() { f64::NEG_INFINITY } else { v }
                        })
                        .collect::<Vec<f64>>()),
                    Err(Error::Instability { .. }) => Ok(rows
                        .rows()
                        .into_iter()
                        .map(|r| self.log_prob_single_lossy(r.as_slice().expect("contiguous")))
                        .collect()),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    fn log_prob_single_lossy(&self, theta: &[f64]) -> f64 {
        match self.inverse(theta) {
            Ok((z, ld)) => {
                let v = self.base.log_prob(&z) + ld;
                if v.is_nan() { f64::NEG_INFINITY } else { v }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Draws `n` points: `z ~ p_Z`, then `θ = f(z)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        Ok(self.sample_with_log_prob(n, seed)?.0)
    }

    /// Like [`sample`](Self::sample), also returning `log q(θ) = log p_Z(z) − log|det ∂θ/∂z|`.
    pub fn sample_with_log_prob(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Array1<f64>)> {
        let z = self.base.sample(n, seed);
        let parts = (0..n.div_ceil(EVAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = z.slice(s![c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n), ..]);
                let (x, ld) = self.forward_batch(rows)?;
                let lq: Vec<f64> = rows
                    .rows()
                    .into_iter()
                    .zip(ld.iter())
                    .map(|(zr, l)| self.base.log_prob(zr.as_slice().expect("contiguous")) - l)
                    .collect();
                Ok((x, lq))
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok((Array2::zeros((0, self.dim)), Array1::zeros(0)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).expect("same width");
        let lq: Array1<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
        Ok((x, lq))
    }

    /// Weighted negative log-likelihood `-(1/|b|) Σ wᵢ log q(θᵢ)` and its exact
    /// gradient with respect to [`params_flat`](Self::params_flat).
    pub fn weighted_nll_with_grad(&self, theta: ArrayView2<'_, f64>, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_cols(theta.ncols())?;
        let b = theta.nrows();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if weights.len() != b {
            return Err(Error::DimensionMismatch {
                context: "batch weights",
                expected: b,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        // Zero-weight rows contribute exactly nothing.
        let active: Vec<usize> = (0..b).filter(|&i| weights[i] != 0.0).collect();
        let scale = 1.0 / b as f64;
        let n_params = self.num_params();

        let parts = active
            .par_chunks(GRAD_CHUNK)
            .map(|idx| {
                let rows = theta.select(Axis(0), idx);
                let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
                self.chunk_loss_and_grad(rows.view(), &w, scale)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for (l, g) in parts {
            loss += l;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Instability {
                layer: self.layers.len(),
                detail: "non-finite loss".into(),
            });
        }
        Ok((loss, grad))
    }

    fn chunk_loss_and_grad(&self, theta: ArrayView2<'_, f64>, w: &[f64], scale: f64) -> Result<(f64, Vec<f64>)> {
        let n = theta.nrows();
        let mut x = theta.to_owned();
        let mut log_det = Array1::<f64>::zeros(n);
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (ld, tape) = layer.inverse_taped(x.view()).map_err(|e| at_layer(e, i))?;
            log_det += &ld;
            x = CouplingLayer::tape_output(&tape).clone();
            tapes.push((i, tape));
        }

        let d = self.dim;
        let mut grad_z = Array2::<f64>::zeros((n, d));
        let mut loss = 0.0;
        let mut gbuf = vec![0.0; d];
        for r in 0..n {
            let zr = x.row(r);
            let lp = self.base.log_prob_with_grad(zr.as_slice().expect("contiguous"), &mut gbuf);
            let coeff = -w[r] * scale;
            loss += coeff * (lp + log_det[r]);
            for j in 0..d {
                grad_z[[r, j]] = coeff * gbuf[j];
            }
        }
        let grad_ld = Array1::from_iter(w.iter().map(|wi| -wi * scale));

        let mut grad = vec![0.0; self.num_params()];
        let offsets = self.layer_offsets();
        // tapes were pushed last layer first; layer 0's inverse ran last, so walk back from it
        for (i, tape) in tapes.iter().rev() {
            let layer = &self.layers[*i];
            let off = offsets[*i];
            let ns = layer.s_params().len();
            let (s_grad, rest) = grad[off..off + layer.param_count()].split_at_mut(ns);
            grad_z = layer.inverse_backward(tape, &grad_z, &grad_ld, s_grad, rest)?;
        }
        Ok((loss, grad))
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row vector")
}

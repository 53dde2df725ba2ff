//! Affine coupling layer.
//!
//! Coordinates with `mask = 1` pass through. The rest are transformed as
//! `x = z·exp(s̃) + t`, where `s̃ = c·tanh(s/c)` and `s`, `t` are conditioner
//! outputs evaluated on `z ⊙ mask`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::Serialize;

use crate::diffnet::{self, MlpSpec, MlpTape, ParameterStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    s_spec: MlpSpec,
    t_spec: MlpSpec,
    s_params: ParameterStore,
    t_params: ParameterStore,
    scale_clamp: f64,
}

/// Intermediates of [`CouplingLayer::inverse_taped`] needed by the backward pass.
pub(crate) struct InverseTape {
    s_tape: MlpTape,
    t_tape: MlpTape,
    /// clamped scales, zero on pass-through columns
    s_clamped: Array2<f64>,
    z: Array2<f64>,
}

impl CouplingLayer {
    pub fn new(
        mask: Vec<bool>,
        s_spec: MlpSpec,
        t_spec: MlpSpec,
        s_params: ParameterStore,
        t_params: ParameterStore,
        scale_clamp: f64,
    ) -> Result<Self> {
        let d = mask.len();
        if !mask.iter().any(|&m| m) || mask.iter().all(|&m| m) {
            return Err(Error::InvalidArgument(
                "coupling mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        for spec in [&s_spec, &t_spec] {
            spec.validate()?;
            if spec.input_dim != d || spec.output_dim != d {
                return Err(Error::DimensionMismatch {
                    context: "conditioner dimensions",
                    expected: d,
                    got: if spec.input_dim != d { spec.input_dim } else { spec.output_dim },
                });
            }
        }
        for (spec, p) in [(&s_spec, &s_params), (&t_spec, &t_params)] {
            if p.len() != spec.param_count() {
                return Err(Error::DimensionMismatch {
                    context: "conditioner parameters",
                    expected: spec.param_count(),
                    got: p.len(),
                });
            }
        }
        if !(scale_clamp > 0.0) || !scale_clamp.is_finite() {
            return Err(Error::InvalidArgument("scale_clamp must be positive".into()));
        }
        Ok(Self {
            mask,
            s_spec,
            t_spec,
            s_params,
            t_params,
            scale_clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    pub fn s_spec(&self) -> &MlpSpec {
        &self.s_spec
    }

    pub fn t_spec(&self) -> &MlpSpec {
        &self.t_spec
    }

    pub fn s_params(&self) -> &ParameterStore {
        &self.s_params
    }

    pub fn t_params(&self) -> &ParameterStore {
        &self.t_params
    }

    pub fn s_params_mut(&mut self) -> &mut ParameterStore {
        &mut self.s_params
    }

    pub fn t_params_mut(&mut self) -> &mut ParameterStore {
        &mut self.t_params
    }

    pub fn param_count(&self) -> usize {
        self.s_params.len() + self.t_params.len()
    }

    fn masked_input(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut u = x.to_owned();
        for (j, &keep) in self.mask.iter().enumerate() {
            if !keep {
                u.column_mut(j).fill(0.0);
            }
        }
        u
    }

    fn clamp_scales(&self, s: &mut Array2<f64>) {
        let c = self.scale_clamp;
        for (j, &keep) in self.mask.iter().enumerate() {
            let mut col = s.column_mut(j);
            if keep {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| c * (v / c).tanh());
            }
        }
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "coupling layer input",
                expected: self.dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn conditioners(&self, u: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut s = diffnet::eval_batch(&self.s_spec, self.s_params.values(), u)?;
        let t = diffnet::eval_batch(&self.t_spec, self.t_params.values(), u)?;
        self.clamp_scales(&mut s);
        Ok((s, t))
    }

    /// Batched forward map `z → x`, with per-row `log|det ∂x/∂z|`.
    pub fn forward_batch(&self, z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_dim(z.ncols())?;
        let u = self.masked_input(z);
        let (s, t) = self.conditioners(u.view())?;
        let mut x = z.to_owned();
        for (j, &keep) in self.mask.iter().enumerate() {
            if !keep {
                Zip::from(x.column_mut(j))
                    .and(s.column(j))
                    .and(t.column(j))
                    .for_each(|x, &s, &t| *x = *x * s.exp() + t);
            }
        }
        let log_det = s.sum_axis(Axis(1));
        finite_or_err(&x, &log_det)?;
        Ok((x, log_det))
    }

    /// Batched inverse map `x → z`, with per-row `log|det ∂z/∂x|`.
    pub fn inverse_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_dim(x.ncols())?;
        let u = self.masked_input(x);
        let (s, t) = self.conditioners(u.view())?;
        let z = self.apply_inverse(x, &s, &t);
        let log_det = -s.sum_axis(Axis(1));
        finite_or_err(&z, &log_det)?;
        Ok((z, log_det))
    }

    fn apply_inverse(&self, x: ArrayView2<'_, f64>, s: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        let mut z = x.to_owned();
        for (j, &keep) in self.mask.iter().enumerate() {
            if !keep {
                Zip::from(z.column_mut(j))
                    .and(s.column(j))
                    .and(t.column(j))
                    .for_each(|z, &s, &t| *z = (*z - t) * (-s).exp());
            }
        }
        z
    }

    pub(crate) fn inverse_taped(&self, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, InverseTape)> {
        self.check_dim(x.ncols())?;
        let u = self.masked_input(x);
        let (mut s, s_tape) = diffnet::forward_batch(&self.s_spec, self.s_params.values(), u.view())?;
        let (t, t_tape) = diffnet::forward_batch(&self.t_spec, self.t_params.values(), u.view())?;
        self.clamp_scales(&mut s);
        let z = self.apply_inverse(x, &s, &t);
        let log_det = -s.sum_axis(Axis(1));
        finite_or_err(&z, &log_det)?;
        Ok((
            log_det,
            InverseTape {
                s_tape,
                t_tape,
                s_clamped: s,
                z,
            },
        ))
    }

    pub(crate) fn tape_output(tape: &InverseTape) -> &Array2<f64> {
        &tape.z
    }

    /// Backward pass through the inverse map.
    ///
    /// `grad_z` is `∂L/∂z` per row and `grad_log_det` is `∂L/∂(log_det_inv)` per
    /// row. Parameter gradients are added into `s_grad` and `t_grad`; the return
    /// value is `∂L/∂x`.
    pub(crate) fn inverse_backward(
        &self,
        tape: &InverseTape,
        grad_z: &Array2<f64>,
        grad_log_det: &Array1<f64>,
        s_grad: &mut [f64],
        t_grad: &mut [f64],
    ) -> Result<Array2<f64>> {
        let c = self.scale_clamp;
        let (b, d) = grad_z.dim();
        let mut gx = grad_z.clone();
        let mut gs = Array2::<f64>::zeros((b, d));
        let mut gt = Array2::<f64>::zeros((b, d));
        for (j, &keep) in self.mask.iter().enumerate() {
            if keep {
                continue;
            }
            for r in 0..b {
                let sc = tape.s_clamped[[r, j]];
                let e = (-sc).exp();
                let g = grad_z[[r, j]];
                gx[[r, j]] = g * e;
                gt[[r, j]] = -g * e;
                let g_sc = -g * tape.z[[r, j]] - grad_log_det[r];
                let ratio = sc / c;
                gs[[r, j]] = g_sc * (1.0 - ratio * ratio);
            }
        }
        let gu_s = diffnet::backward_batch(&self.s_spec, self.s_params.values(), &tape.s_tape, gs, s_grad)?;
        let gu_t = diffnet::backward_batch(&self.t_spec, self.t_params.values(), &tape.t_tape, gt, t_grad)?;
        for (j, &keep) in self.mask.iter().enumerate() {
            if keep {
                let mut col = gx.column_mut(j);
                col += &gu_s.column(j);
                col += &gu_t.column(j);
            }
        }
        Ok(gx)
    }

    /// Single-point forward map.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        let (x, ld) = self.forward_batch(zv)?;
        Ok((x.into_raw_vec_and_offset().0, ld[0]))
    }

    /// Single-point inverse map.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (z, ld) = self.inverse_batch(xv)?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }
}

fn finite_or_err(values: &Array2<f64>, log_det: &Array1<f64>) -> Result<()> {
    if values.iter().chain(log_det.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instability {
            layer: 0,
            detail: "non-finite coupling output".into(),
        })
    }
}

//! Feedforward conditioner networks with exact reverse-mode gradients.
//!
//! A network is described by an [`MlpSpec`] and its weights live in a flat
//! [`ParameterStore`]. Linear layer `l` stores its weight matrix row-major with
//! shape `(out, in)` under the name `w{l}`, followed by its bias `b{l}`.
//!
//! The batched entry points ([`forward_batch`], [`backward_batch`]) are what the
//! flow uses; [`mlp_forward`] and [`mlp_vjp`] are the single-vector forms.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    /// Leaky ReLU with slope 0.01 on the negative side.
    LeakyRelu,
}

/// `exp(x)` for `x ≤ 0`, branch-free so that loops over it vectorize.
/// Inputs below -700 are clamped; NaN propagates.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = if x < -700.0 { -700.0 } else { x };
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series to degree 13 on |r| ≤ ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let biased = shifted.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023);
    p * f64::from_bits(biased << 52)
}

/// Hyperbolic tangent, within a few ulp of `f64::tanh`.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let e = exp_nonpositive(-2.0 * a);
    let large = (1.0 - e) / (1.0 + e);
    let a2 = a * a;
    let small = a * (1.0 + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0 + a2 * (62.0 / 2835.0)))));
    (if a < 0.03 { small } else { large }).copysign(x)
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "mlp needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("mlp dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` for every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct StoreRepr {
    values: Vec<f64>,
    layout: Vec<ParamSlice>,
}

/// Flat parameter vector with named, contiguous slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoreRepr", into = "StoreRepr")]
pub struct ParameterStore {
    values: Vec<f64>,
    layout: Vec<ParamSlice>,
}

impl ParameterStore {
    /// All-zero store with the layout of `spec`.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (l, (i, o)) in spec.layer_dims().into_iter().enumerate() {
            layout.push(ParamSlice {
                name: format!("w{l}"),
                offset,
                shape: vec![o, i],
            });
            offset += i * o;
            layout.push(ParamSlice {
                name: format!("b{l}"),
                offset,
                shape: vec![o],
            });
            offset += o;
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    /// Rebuilds a store from raw parts, checking the layout invariants.
    pub fn from_parts(values: Vec<f64>, layout: Vec<ParamSlice>) -> Result<Self> {
        let mut offset = 0;
        for s in &layout {
            if s.offset != offset {
                return Err(Error::Format(format!(
                    "parameter slice `{}` at offset {} but expected {offset}",
                    s.name, s.offset
                )));
            }
            offset += s.len();
        }
        if offset != values.len() {
            return Err(Error::Format(format!(
                "layout covers {offset} values, store has {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter value".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    fn matches(&self, spec: &MlpSpec) -> bool {
        self.values.len() == spec.param_count()
    }
}

impl TryFrom<StoreRepr> for ParameterStore {
    type Error = Error;

    fn try_from(r: StoreRepr) -> Result<Self> {
        Self::from_parts(r.values, r.layout)
    }
}

impl From<ParameterStore> for StoreRepr {
    fn from(p: ParameterStore) -> Self {
        Self {
            values: p.values,
            layout: p.layout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Xavier-uniform everywhere except the final linear layer, which is zero.
    #[default]
    ZeroLastLayer,
    Xavier,
}

pub fn init_params(spec: &MlpSpec, seed: u64, scheme: InitScheme) -> ParameterStore {
    let mut store = ParameterStore::zeros(spec);
    let mut rng = rng::seeded(seed);
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        if l == last && scheme == InitScheme::ZeroLastLayer {
            continue;
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = &store.layout[2 * l];
        let (start, end) = (w.offset, w.offset + w.len());
        for v in &mut store.values[start..end] {
            *v = rng.random_range(-bound..bound);
        }
    }
    store
}

fn weight_view<'a>(params: &'a [f64], offset: usize, fan_in: usize, fan_out: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_in * fan_out])
        .expect("weight slice shape")
}

/// Layer inputs recorded by [`forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// `inputs[l]` is the `(batch, in_l)` input of linear layer `l`; for `l > 0`
    /// these are post-activation values.
    inputs: Vec<Array2<f64>>,
}

fn check_params(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "mlp parameters",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

fn forward_impl(
    spec: &MlpSpec,
    params: &[f64],
    x: ArrayView2<'_, f64>,
    mut tape: Option<&mut MlpTape>,
) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    if x.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp input",
            expected: spec.input_dim,
            got: x.ncols(),
        });
    }
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut offset = 0;
    let mut h = x.to_owned();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = weight_view(params, offset, fan_in, fan_out);
        offset += fan_in * fan_out;
        let b = ArrayView1::from(&params[offset..offset + fan_out]);
        offset += fan_out;
        let mut out = h.dot(&w.t());
        out += &b;
        if l != last {
            let act = spec.activation;
            match (act, out.as_slice_mut()) {
                (Activation::Tanh, Some(flat)) => flat.iter_mut().for_each(|v| *v = tanh(*v)),
                _ => out.mapv_inplace(|v| act.apply(v)),
            }
        }
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.push(h);
        }
        h = out;
    }
    Ok(h)
}

/// Forward pass over a `(batch, input_dim)` matrix, recording a tape.
pub fn forward_batch(
    spec: &MlpSpec,
    params: &[f64],
    x: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, MlpTape)> {
    let mut tape = MlpTape {
        inputs: Vec::with_capacity(spec.hidden_dims.len() + 1),
    };
    let out = forward_impl(spec, params, x, Some(&mut tape))?;
    Ok((out, tape))
}

/// Forward pass without recording anything.
pub fn eval_batch(spec: &MlpSpec, params: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    forward_impl(spec, params, x, None)
}

/// Reverse pass. Adds `∂(cot·out)/∂params` into `param_grad` and returns
/// `∂(cot·out)/∂x` with shape `(batch, input_dim)`.
pub fn backward_batch(
    spec: &MlpSpec,
    params: &[f64],
    tape: &MlpTape,
    cotangent: Array2<f64>,
    param_grad: &mut [f64],
) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    if param_grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "mlp parameter gradient",
            expected: params.len(),
            got: param_grad.len(),
        });
    }
    if cotangent.ncols() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp cotangent",
            expected: spec.output_dim,
            got: cotangent.ncols(),
        });
    }
    let dims = spec.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &(i, o) in &dims {
        offsets.push(offset);
        offset += i * o + o;
    }

    let mut g = cotangent;
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let w_off = offsets[l];
        let b_off = w_off + fan_in * fan_out;
        let input = &tape.inputs[l];

        let mut dw = ArrayViewMut2::from_shape(
            (fan_out, fan_in),
            &mut param_grad[w_off..w_off + fan_in * fan_out],
        )
        .expect("weight grad shape");
        general_mat_mul(1.0, &g.t(), input, 1.0, &mut dw);
        for (dst, s) in param_grad[b_off..b_off + fan_out]
            .iter_mut()
            .zip(g.sum_axis(Axis(0)))
        {
            *dst += s;
        }

        let w = weight_view(params, w_off, fan_in, fan_out);
        let mut gx = g.dot(&w);
        if l > 0 {
            let act = spec.activation;
            Zip::from(&mut gx)
                .and(input)
                .for_each(|gv, &y| *gv *= act.derivative_from_output(y));
        }
        g = gx;
    }
    Ok(g)
}

/// Single-vector forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
    if !params.matches(spec) {
        return Err(Error::DimensionMismatch {
            context: "mlp parameters",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let out = eval_batch(spec, params.values(), xv)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// Vector-Jacobian product: returns `(∂(c·y)/∂x, ∂(c·y)/∂params)` for `y = mlp(x)`.
pub fn mlp_vjp(
    spec: &MlpSpec,
    params: &ParameterStore,
    x: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cotangent.len() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp cotangent",
            expected: spec.output_dim,
            got: cotangent.len(),
        });
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (_, tape) = forward_batch(spec, params.values(), xv)?;
    let cot = Array2::from_shape_vec((1, cotangent.len()), cotangent.to_vec()).expect("row vector");
    let mut pg = vec![0.0; params.len()];
    let gx = backward_batch(spec, params.values(), &tape, cot, &mut pg)?;
    Ok((gx.into_raw_vec_and_offset().0, pg))
}

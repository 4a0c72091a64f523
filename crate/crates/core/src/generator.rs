//! Conditional generator network `(c, z) -> x`.
//!
//! A single-hidden-layer MLP over the concatenated input `[c; z]`. Gradients
//! are vector-Jacobian products against a residual `x - g(c, z)`, for the
//! latent block of the input and for every weight and bias.
//!
//! Parameters live in one flat vector laid out as `w1 | b1 | w2 | b2`, with
//! `w1` shaped `(K + d) x h` and `w2` shaped `h x D`, both row-major. The
//! optimizer and the checkpoint format work on that flat view directly.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{AbpError, Result};
use crate::numerics::RngStream;

/// Negative slope of the hidden LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

static REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Identity,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative; at exactly zero the negative-side slope is used.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer sizes: attribute dim `K`, latent dim `d`, hidden width `h`, feature dim `D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub cond: usize,
    pub latent: usize,
    pub hidden: usize,
    pub visual: usize,
}

impl Dims {
    pub fn new(cond: usize, latent: usize, hidden: usize, visual: usize) -> Self {
        Dims {
            cond,
            latent,
            hidden,
            visual,
        }
    }

    pub fn input(&self) -> usize {
        self.cond + self.latent
    }

    fn w1_len(&self) -> usize {
        self.input() * self.hidden
    }

    fn b1_offset(&self) -> usize {
        self.w1_len()
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden * self.visual
    }

    pub fn param_count(&self) -> usize {
        self.b2_offset() + self.visual
    }

    fn validate(&self) -> Result<()> {
        if self.cond == 0 || self.latent == 0 || self.hidden == 0 || self.visual == 0 {
            return Err(AbpError::Config(format!(
                "all generator dimensions must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weights and biases of the generator, plus the observation noise std.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    dims: Dims,
    hidden_act: Activation,
    output_act: Activation,
    sigma: f64,
    theta: Vec<f64>,
    #[serde(skip, default = "next_revision")]
    revision: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.hidden_act == other.hidden_act
            && self.output_act == other.output_act
            && self.sigma.to_bits() == other.sigma.to_bits()
            && self.theta.len() == other.theta.len()
            && self
                .theta
                .iter()
                .zip(&other.theta)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelParams {
    pub fn new(
        dims: Dims,
        hidden_act: Activation,
        output_act: Activation,
        sigma: f64,
        theta: Vec<f64>,
    ) -> Result<Self> {
        dims.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AbpError::Config(format!("sigma must be > 0, got {sigma}")));
        }
        if theta.len() != dims.param_count() {
            return Err(AbpError::shape("ModelParams::new", dims.param_count(), theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite("ModelParams::new".into()));
        }
        Ok(ModelParams {
            dims,
            hidden_act,
            output_act,
            sigma,
            theta,
            revision: next_revision(),
        })
    }

    pub fn zeros(dims: Dims, hidden_act: Activation, output_act: Activation, sigma: f64) -> Result<Self> {
        ModelParams::new(dims, hidden_act, output_act, sigma, vec![0.0; dims.param_count()])
    }

    /// Glorot-uniform weights, zero biases, LeakyReLU hidden layer.
    pub fn init(rng: &mut RngStream, dims: Dims, output_act: Activation, sigma: f64) -> Result<Self> {
        ModelParams::init_with(rng, dims, Activation::leaky(), output_act, sigma)
    }

    pub fn init_with(
        rng: &mut RngStream,
        dims: Dims,
        hidden_act: Activation,
        output_act: Activation,
        sigma: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut theta = vec![0.0; dims.param_count()];
        let a1 = glorot_bound(dims.input(), dims.hidden);
        for w in &mut theta[..dims.w1_len()] {
            *w = a1 * (2.0 * rng.uniform() - 1.0);
        }
        let a2 = glorot_bound(dims.hidden, dims.visual);
        for w in &mut theta[dims.w2_offset()..dims.b2_offset()] {
            *w = a2 * (2.0 * rng.uniform() - 1.0);
        }
        ModelParams::new(dims, hidden_act, output_act, sigma, theta)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn hidden_act(&self) -> Activation {
        self.hidden_act
    }

    pub fn output_act(&self) -> Activation {
        self.output_act
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn w1(&self) -> &[f64] {
        &self.theta[..self.dims.w1_len()]
    }

    pub fn b1(&self) -> &[f64] {
        &self.theta[self.dims.b1_offset()..self.dims.w2_offset()]
    }

    pub fn w2(&self) -> &[f64] {
        &self.theta[self.dims.w2_offset()..self.dims.b2_offset()]
    }

    pub fn b2(&self) -> &[f64] {
        &self.theta[self.dims.b2_offset()..]
    }

    /// Mutates the flat parameter vector. Any trace taken before the call
    /// becomes stale. Fails if the closure leaves a non-finite entry.
    pub fn update_theta(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        f(&mut self.theta);
        self.revision = next_revision();
        if let Some(i) = self.theta.iter().position(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite(format!("model parameter {i}")));
        }
        Ok(())
    }

    fn check_inputs(&self, c: &[f64], z: &[f64]) -> Result<()> {
        if c.len() != self.dims.cond {
            return Err(AbpError::shape("generator class attributes", self.dims.cond, c.len()));
        }
        if z.len() != self.dims.latent {
            return Err(AbpError::shape("generator latent vector", self.dims.latent, z.len()));
        }
        Ok(())
    }

    /// Noiseless mean `g(c, z)` plus the cache needed for back-propagation.
    pub fn forward(&self, c: &[f64], z: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_inputs(c, z)?;
        let Dims { hidden: h, visual: dv, .. } = self.dims;
        let mut input = Vec::with_capacity(self.dims.input());
        input.extend_from_slice(c);
        input.extend_from_slice(z);

        let mut pre_hidden = self.b1().to_vec();
        let w1 = self.w1();
        for (i, &v) in input.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (p, &w) in pre_hidden.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                *p += v * w;
            }
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&p| self.hidden_act.apply(p)).collect();

        let mut pre_out = self.b2().to_vec();
        let w2 = self.w2();
        for (j, &a) in hidden.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (p, &w) in pre_out.iter_mut().zip(&w2[j * dv..(j + 1) * dv]) {
                *p += a * w;
            }
        }
        let out: Vec<f64> = pre_out.iter().map(|&p| self.output_act.apply(p)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite("generator output".into()));
        }
        let trace = ForwardTrace {
            revision: self.revision,
            input,
            pre_hidden,
            hidden,
            pre_out,
        };
        Ok((out, trace))
    }

    /// Output-layer and hidden-layer deltas for a residual.
    fn deltas(&self, trace: &ForwardTrace, residual: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if trace.revision != self.revision {
            return Err(AbpError::StaleTrace {
                trace: trace.revision,
                params: self.revision,
            });
        }
        if residual.len() != self.dims.visual {
            return Err(AbpError::shape("residual", self.dims.visual, residual.len()));
        }
        let dv = self.dims.visual;
        let delta_out: Vec<f64> = residual
            .iter()
            .zip(&trace.pre_out)
            .map(|(&r, &p)| r * self.output_act.derivative(p))
            .collect();
        let w2 = self.w2();
        let delta_hidden: Vec<f64> = trace
            .pre_hidden
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let back: f64 = w2[j * dv..(j + 1) * dv]
                    .iter()
                    .zip(&delta_out)
                    .map(|(w, d)| w * d)
                    .sum();
                back * self.hidden_act.derivative(p)
            })
            .collect();
        Ok((delta_out, delta_hidden))
    }

    /// `(dg/dz)^T residual`.
    pub fn grad_wrt_z(&self, trace: &ForwardTrace, residual: &[f64]) -> Result<Vec<f64>> {
        let (_, delta_hidden) = self.deltas(trace, residual)?;
        let Dims { cond, latent, hidden: h, .. } = self.dims;
        let w1 = self.w1();
        Ok((0..latent)
            .map(|t| {
                let row = cond + t;
                w1[row * h..(row + 1) * h]
                    .iter()
                    .zip(&delta_hidden)
                    .map(|(w, d)| w * d)
                    .sum()
            })
            .collect())
    }

    /// `(dg/dtheta)^T residual`, shaped like the parameters.
    pub fn grad_wrt_theta(&self, trace: &ForwardTrace, residual: &[f64]) -> Result<Gradient> {
        let mut grad = Gradient::zeros(self.dims);
        self.accumulate_grad_theta(trace, residual, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * (dg/dtheta)^T residual` into `grad`.
    pub fn accumulate_grad_theta(
        &self,
        trace: &ForwardTrace,
        residual: &[f64],
        scale: f64,
        grad: &mut Gradient,
    ) -> Result<()> {
        if grad.dims != self.dims {
            return Err(AbpError::shape("gradient buffer", format!("{:?}", self.dims), format!("{:?}", grad.dims)));
        }
        let (delta_out, delta_hidden) = self.deltas(trace, residual)?;
        let d = self.dims;
        let (h, dv) = (d.hidden, d.visual);
        let g = &mut grad.values;

        for (i, &v) in trace.input.iter().enumerate() {
            let sv = scale * v;
            if sv == 0.0 {
                continue;
            }
            for (gw, &dh) in g[i * h..(i + 1) * h].iter_mut().zip(&delta_hidden) {
                *gw += sv * dh;
            }
        }
        for (gb, &dh) in g[d.b1_offset()..d.w2_offset()].iter_mut().zip(&delta_hidden) {
            *gb += scale * dh;
        }
        let w2_off = d.w2_offset();
        for (j, &a) in trace.hidden.iter().enumerate() {
            let sa = scale * a;
            if sa == 0.0 {
                continue;
            }
            let row = &mut g[w2_off + j * dv..w2_off + (j + 1) * dv];
            for (gw, &dout) in row.iter_mut().zip(&delta_out) {
                *gw += sa * dout;
            }
        }
        for (gb, &dout) in g[d.b2_offset()..].iter_mut().zip(&delta_out) {
            *gb += scale * dout;
        }
        Ok(())
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Activations cached by [`ModelParams::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    revision: u64,
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    pre_out: Vec<f64>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_hidden(&self) -> &[f64] {
        &self.pre_hidden
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    pub fn pre_out(&self) -> &[f64] {
        &self.pre_out
    }
}

/// Gradient with the same flat layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    dims: Dims,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(dims: Dims) -> Self {
        Gradient {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(AbpError::shape("Gradient::from_values", dims.param_count(), values.len()));
        }
        Ok(Gradient { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[..self.dims.w1_len()]
    }

    pub fn b1(&self) -> &[f64] {
        &self.values[self.dims.b1_offset()..self.dims.w2_offset()]
    }

    pub fn w2(&self) -> &[f64] {
        &self.values[self.dims.w2_offset()..self.dims.b2_offset()]
    }

    pub fn b2(&self) -> &[f64] {
        &self.values[self.dims.b2_offset()..]
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

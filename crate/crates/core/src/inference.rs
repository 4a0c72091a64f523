//! Inferential back-propagation: persistent Langevin chains over the latent
//! factors of each training example.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{AbpError, Result};
use crate::generator::ModelParams;
use crate::numerics::{squared_norm, Matrix, RngStream};

/// A chain whose latent norm exceeds this is treated as diverged.
pub const MAX_LATENT_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_enabled: bool,
    pub sigma: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 10,
            step_size: 0.3,
            noise_enabled: true,
            sigma: 0.3,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(AbpError::Config(format!("langevin step size must be >= 0, got {}", self.step_size)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(AbpError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One latent vector per training example, in training-set order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBank {
    z: Matrix,
}

impl LatentBank {
    /// Rows drawn from N(0, I).
    pub fn init(rng: &mut RngStream, n: usize, dim: usize) -> Self {
        let mut data = vec![0.0; n * dim];
        rng.fill_gaussian(&mut data, 0.0, 1.0);
        LatentBank {
            z: Matrix::from_vec(n, dim, data).expect("gaussian draws are finite"),
        }
    }

    pub fn from_matrix(z: Matrix) -> Self {
        LatentBank { z }
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    pub fn set_row(&mut self, i: usize, z: &[f64]) -> Result<()> {
        self.z.set_row(i, z)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn mean_squared_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.z.iter_rows().map(squared_norm).sum::<f64>() / self.len() as f64
    }
}

/// Masked residual `m ∘ (x - g)`.
pub(crate) fn residual(x: &[f64], g: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(g).zip(m).map(|((x, g), m)| m * (x - g)).collect(),
        None => x.iter().zip(g).map(|(x, g)| x - g).collect(),
    }
}

fn check_obs(params: &ModelParams, x: &[f64], mask: Option<&[f64]>) -> Result<()> {
    let dv = params.dims().visual;
    if x.len() != dv {
        return Err(AbpError::shape("observed features", dv, x.len()));
    }
    if let Some(m) = mask {
        if m.len() != dv {
            return Err(AbpError::shape("mask", dv, m.len()));
        }
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(AbpError::Invalid("mask entries must be 0 or 1".into()));
        }
    }
    Ok(())
}

/// `log p(x, z | c)` up to a constant: `-|m∘(x - g)|² / 2σ² - |z|² / 2`.
pub fn log_joint(
    params: &ModelParams,
    c: &[f64],
    x: &[f64],
    z: &[f64],
    sigma: f64,
    mask: Option<&[f64]>,
) -> Result<f64> {
    check_obs(params, x, mask)?;
    let (g, _) = params.forward(c, z)?;
    let r = residual(x, &g, mask);
    Ok(-squared_norm(&r) / (2.0 * sigma * sigma) - 0.5 * squared_norm(z))
}

/// One Langevin update of `z` targeting `p(z | x, c)`.
pub fn langevin_step(
    params: &ModelParams,
    c: &[f64],
    x: &[f64],
    z: &[f64],
    cfg: &LangevinConfig,
    rng: &mut RngStream,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_obs(params, x, mask)?;
    let (g, trace) = params.forward(c, z)?;
    let r = residual(x, &g, mask);
    let pull = params.grad_wrt_z(&trace, &r)?;

    let s = cfg.step_size;
    let half_s2 = 0.5 * s * s;
    let inv_var = 1.0 / (cfg.sigma * cfg.sigma);
    let mut next: Vec<f64> = z
        .iter()
        .zip(&pull)
        .map(|(&zi, &gi)| zi + half_s2 * (inv_var * gi - zi))
        .collect();
    if cfg.noise_enabled && s > 0.0 {
        for v in &mut next {
            *v += s * rng.standard_normal();
        }
    }
    let norm2 = squared_norm(&next);
    if !norm2.is_finite() || norm2.sqrt() > MAX_LATENT_NORM {
        return Err(AbpError::ChainDiverged { example: None });
    }
    Ok(next)
}

/// `cfg.steps` sequential Langevin updates starting from `z`.
pub fn run_chain(
    params: &ModelParams,
    c: &[f64],
    x: &[f64],
    z: &[f64],
    cfg: &LangevinConfig,
    rng: &mut RngStream,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut cur = z.to_vec();
    for _ in 0..cfg.steps {
        cur = langevin_step(params, c, x, &cur, cfg, rng, mask)?;
    }
    Ok(cur)
}

/// Advances the chains of the selected bank rows by `cfg.steps` each.
///
/// `positions` index the bank, i.e. positions within `dataset.train_idx`.
/// Every row gets its own child noise stream forked from `rng` in the order
/// given, so the result does not depend on how rows are spread over threads.
pub fn infer_batch(
    params: &ModelParams,
    dataset: &Dataset,
    bank: &mut LatentBank,
    positions: &[usize],
    cfg: &LangevinConfig,
    rng: &mut RngStream,
    masked: bool,
) -> Result<()> {
    if bank.len() != dataset.train_idx.len() {
        return Err(AbpError::shape("latent bank rows", dataset.train_idx.len(), bank.len()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= bank.len()) {
        return Err(AbpError::Invalid(format!("bank position {p} out of range ({} rows)", bank.len())));
    }
    if masked && dataset.mask.is_none() {
        return Err(AbpError::Config("masked inference requested but the dataset has no mask".into()));
    }
    if cfg.steps == 0 {
        return Ok(());
    }
    let streams: Vec<RngStream> = positions.iter().map(|&p| rng.fork(p as u64)).collect();
    let updated: Vec<Result<Vec<f64>>> = positions
        .par_iter()
        .zip(streams)
        .map(|(&p, mut stream)| {
            let example = dataset.train_idx[p];
            let c = dataset.attrs.row(dataset.labels[example]);
            let x = dataset.visual.row(example);
            let mask = if masked {
                dataset.mask.as_ref().map(|m| m.row(example))
            } else {
                None
            };
            run_chain(params, c, x, bank.row(p), cfg, &mut stream, mask).map_err(|e| match e {
                AbpError::ChainDiverged { .. } => AbpError::ChainDiverged { example: Some(example) },
                other => other,
            })
        })
        .collect();
    for (&p, z) in positions.iter().zip(updated) {
        bank.set_row(p, &z?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Activation, Dims};
    use crate::numerics::gaussian;

    /// Scalar linear model g(c, z) = a*c + b*z through identity layers with one hidden unit.
    pub(crate) fn scalar_linear(a: f64, b: f64, sigma: f64) -> ModelParams {
        // w1 = [a, b], b1 = 0, w2 = [1], b2 = 0
        ModelParams::new(
            Dims::new(1, 1, 1, 1),
            Activation::Identity,
            Activation::Identity,
            sigma,
            vec![a, b, 0.0, 1.0, 0.0],
        )
        .unwrap()
    }

    fn linear_net(seed: u64, dims: Dims) -> ModelParams {
        let mut rng = RngStream::new(seed, 0);
        ModelParams::init_with(&mut rng, dims, Activation::Identity, Activation::Identity, 0.3).unwrap()
    }

    #[test]
    fn zero_step_size_is_identity() {
        let p = linear_net(1, Dims::new(2, 3, 4, 5));
        let cfg = LangevinConfig {
            step_size: 0.0,
            ..Default::default()
        };
        let z = [0.1, -0.2, 0.3];
        let out = langevin_step(&p, &[1.0, 2.0], &[0.5; 5], &z, &cfg, &mut RngStream::new(0, 2), None).unwrap();
        assert_eq!(out, z.to_vec());
    }

    #[test]
    fn drift_vanishes_at_posterior_mean() {
        // posterior mean mu = (B^T B / s2 + I)^-1 B^T (x - A c) / s2, solved with nalgebra
        let dims = Dims::new(2, 3, 4, 5);
        let sigma = 0.3;
        let p = linear_net(2, dims);
        let (h, dv, k, d) = (dims.hidden, dims.visual, dims.cond, dims.latent);
        let w1 = nalgebra::DMatrix::from_row_slice(k + d, h, p.w1());
        let w2 = nalgebra::DMatrix::from_row_slice(h, dv, p.w2());
        let full = (&w1 * &w2).transpose(); // D x (K + d)
        let a = full.columns(0, k).into_owned();
        let b = full.columns(k, d).into_owned();
        let c = nalgebra::DVector::from_vec(vec![0.4, -0.7]);
        let x_vals = gaussian(&mut RngStream::new(3, 0), dv, 0.0, 1.0);
        let x = nalgebra::DVector::from_vec(x_vals.clone());
        let s2 = sigma * sigma;
        let prec = b.transpose() * &b / s2 + nalgebra::DMatrix::identity(d, d);
        let rhs = b.transpose() * (&x - &a * &c) / s2;
        let mu = prec.lu().solve(&rhs).unwrap();

        let cfg = LangevinConfig {
            noise_enabled: false,
            sigma,
            ..Default::default()
        };
        let z: Vec<f64> = mu.iter().copied().collect();
        let out = langevin_step(&p, c.as_slice(), &x_vals, &z, &cfg, &mut RngStream::new(0, 2), None).unwrap();
        for (o, m) in out.iter().zip(&z) {
            assert!((o - m).abs() < 1e-12, "{o} vs {m}");
        }
    }

    #[test]
    fn fully_masked_residual_is_prior_pull() {
        let p = linear_net(4, Dims::new(2, 3, 4, 5));
        let cfg = LangevinConfig {
            noise_enabled: false,
            ..Default::default()
        };
        let z = [0.5, -1.0, 2.0];
        let out = langevin_step(&p, &[1.0, 1.0], &[3.0; 5], &z, &cfg, &mut RngStream::new(0, 2), Some(&[0.0; 5])).unwrap();
        let half_s2 = 0.5 * 0.3 * 0.3;
        for (o, zi) in out.iter().zip(z) {
            assert!((o - (zi - half_s2 * zi)).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let p = linear_net(5, Dims::new(2, 3, 4, 5));
        let cfg = LangevinConfig::default();
        let z = [0.5, -1.0, 2.0];
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = run_chain(&p, &[1.0, 0.0], &x, &z, &cfg, &mut RngStream::new(9, 2), Some(&[1.0; 5])).unwrap();
        let b = run_chain(&p, &[1.0, 0.0], &x, &z, &cfg, &mut RngStream::new(9, 2), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_chain_equals_long_chain() {
        let p = linear_net(6, Dims::new(2, 3, 4, 5));
        let cfg = LangevinConfig::default();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let z0 = [0.0, 0.0, 0.0];
        let mut rng = RngStream::new(1, 2);
        let mid = run_chain(&p, &[1.0, 0.0], &x, &z0, &cfg, &mut rng, None).unwrap();
        let split = run_chain(&p, &[1.0, 0.0], &x, &mid, &cfg, &mut rng, None).unwrap();
        let long_cfg = LangevinConfig { steps: 20, ..cfg };
        let long = run_chain(&p, &[1.0, 0.0], &x, &z0, &long_cfg, &mut RngStream::new(1, 2), None).unwrap();
        assert_eq!(split, long);
    }

    #[test]
    fn gradient_ascent_raises_log_joint() {
        let p = linear_net(7, Dims::new(2, 3, 6, 5));
        let cfg = LangevinConfig {
            noise_enabled: false,
            step_size: 0.05,
            ..Default::default()
        };
        let c = [0.3, 0.9];
        let x = gaussian(&mut RngStream::new(8, 0), 5, 0.0, 1.0);
        let mut z = vec![2.0, -2.0, 1.0];
        let mut prev = log_joint(&p, &c, &x, &z, cfg.sigma, None).unwrap();
        let mut rng = RngStream::new(0, 2);
        for _ in 0..200 {
            z = langevin_step(&p, &c, &x, &z, &cfg, &mut rng, None).unwrap();
            let cur = log_joint(&p, &c, &x, &z, cfg.sigma, None).unwrap();
            assert!(cur >= prev - 1e-12, "{cur} < {prev}");
            prev = cur;
        }
    }

    #[test]
    fn exploding_chain_fails() {
        // a huge step size overshoots the mode and diverges
        let p = scalar_linear(1.0, 50.0, 0.01);
        let cfg = LangevinConfig {
            steps: 100,
            step_size: 1.0,
            noise_enabled: false,
            sigma: 0.01,
        };
        let err = run_chain(&p, &[0.0], &[1.0], &[0.0], &cfg, &mut RngStream::new(0, 2), None).unwrap_err();
        assert!(matches!(err, AbpError::ChainDiverged { .. }));
    }

    #[test]
    fn scalar_chain_matches_gaussian_posterior() {
        // posterior N(mu, v) with v = 1 / (b²/σ² + 1), mu = b (x - a c) / σ² * v
        let (a, b, sigma, c, x) = (0.8, 1.0, 1.0, 1.0, 2.0);
        let v = 1.0 / (b * b / (sigma * sigma) + 1.0);
        let mu = b * (x - a * c) / (sigma * sigma) * v;

        let p = scalar_linear(a, b, sigma);
        let cfg = LangevinConfig {
            steps: 20,
            step_size: 0.15,
            noise_enabled: true,
            sigma,
        };
        let mut rng = RngStream::new(42, 2);
        let mut z = vec![0.0];
        for _ in 0..1000 {
            z = run_chain(&p, &[c], &[x], &z, &cfg, &mut rng, None).unwrap();
        }
        let n = 50_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            z = run_chain(&p, &[c], &[x], &z, &cfg, &mut rng, None).unwrap();
            s1 += z[0];
            s2 += z[0] * z[0];
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean / mu - 1.0).abs() < 0.05, "mean {mean} vs {mu}");
        assert!((var / v - 1.0).abs() < 0.05, "var {var} vs {v}");
    }
}

//! Central finite-difference checks of the generator's vector-Jacobian
//! products on small random networks.
//!
//! The checked objective is `L = ½ |m ∘ (x - g(c, z))|²` (with `m = 1` when
//! unmasked), differentiated with respect to every parameter and every latent
//! coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{AbpError, Result};
use crate::generator::{Activation, Dims, ModelParams};
use crate::inference::residual;
use crate::numerics::{gaussian, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub configs: usize,
    /// Upper bound for each of K, d, h and D.
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            configs: 10,
            max_dim: 16,
            step: 1e-6,
            tolerance: 1e-6,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrt {
    Theta,
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub config: usize,
    pub dims: Dims,
    pub masked: bool,
    pub wrt: Wrt,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub configs_run: usize,
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CheckResult>,
    pub failures: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.configs_run > 0
    }
}

/// Pre-activations closer than this to a kink cause the draw to be redrawn.
const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 1000;

struct Case {
    params: ModelParams,
    c: Vec<f64>,
    z: Vec<f64>,
    x: Vec<f64>,
    mask: Vec<f64>,
}

fn near_kink(act: Activation, values: &[f64]) -> bool {
    act != Activation::Identity && values.iter().any(|v| v.abs() < KINK_MARGIN)
}

fn draw_case(rng: &mut RngStream, max_dim: usize) -> Result<Case> {
    let dim = |rng: &mut RngStream| 1 + rng.below(max_dim);
    let dims = Dims::new(dim(rng), dim(rng), dim(rng), dim(rng));
    let output_act = match rng.below(3) {
        0 => Activation::Relu,
        1 => Activation::leaky(),
        _ => Activation::Identity,
    };
    for _ in 0..MAX_REDRAWS {
        let mut params = ModelParams::init(rng, dims, output_act, 0.3)?;
        let b1 = gaussian(rng, dims.hidden, 0.0, 0.5);
        let b2 = gaussian(rng, dims.visual, 0.0, 0.5);
        params.update_theta(|t| {
            let n = t.len();
            let b1_off = dims.input() * dims.hidden;
            t[b1_off..b1_off + dims.hidden].copy_from_slice(&b1);
            t[n - dims.visual..].copy_from_slice(&b2);
        })?;
        let c = gaussian(rng, dims.cond, 0.0, 1.0);
        let z = gaussian(rng, dims.latent, 0.0, 1.0);
        let x = gaussian(rng, dims.visual, 0.5, 1.0);
        let mask = (0..dims.visual).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
        let (_, trace) = params.forward(&c, &z)?;
        if near_kink(params.hidden_act(), trace.pre_hidden()) || near_kink(output_act, trace.pre_out()) {
            continue;
        }
        return Ok(Case { params, c, z, x, mask });
    }
    Err(AbpError::Invalid("could not draw a configuration away from activation kinks".into()))
}

/// `L(up) - L(down)` for two generator outputs, written as
/// `½ Σ (r⁺ - r⁻)(r⁺ + r⁻)` so the result does not lose digits when `L` is
/// large compared with the difference.
fn loss_delta(x: &[f64], up: &[f64], down: &[f64], mask: Option<&[f64]>) -> f64 {
    let r_up = residual(x, up, mask);
    let r_down = residual(x, down, mask);
    let diff = residual(down, up, mask);
    0.5 * diff.iter().zip(r_up.iter().zip(&r_down)).map(|(d, (a, b))| d * (a + b)).sum::<f64>()
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks one network against finite differences, appending to `report`.
fn check_case(case: &Case, index: usize, masked: bool, cfg: &GradcheckConfig, report: &mut GradcheckReport) -> Result<()> {
    let Case { params, c, z, x, .. } = case;
    let mask = masked.then_some(case.mask.as_slice());
    let (g, trace) = params.forward(c, z)?;
    let r = residual(x, &g, mask);
    // dL/dg = -m∘r
    let grad_theta: Vec<f64> = params.grad_wrt_theta(&trace, &r)?.values().iter().map(|v| -v).collect();
    let grad_z: Vec<f64> = params.grad_wrt_z(&trace, &r)?.iter().map(|v| -v).collect();
    let h = cfg.step;

    let mut record = |wrt: Wrt, i: usize, analytic: f64, numeric: f64| {
        let e = rel_error(analytic, numeric, cfg.floor);
        let result = CheckResult {
            config: index,
            dims: params.dims(),
            masked,
            wrt,
            index: i,
            analytic,
            numeric,
            rel_error: e,
        };
        report.coordinates_checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(result.clone());
        }
        if e.is_nan() || e >= cfg.tolerance {
            report.failures.push(result);
        }
    };

    let mut shifted = params.clone();
    for (i, &a) in grad_theta.iter().enumerate() {
        let base = params.theta()[i];
        shifted.update_theta(|t| t[i] = base + h)?;
        let up = shifted.forward(c, z)?.0;
        shifted.update_theta(|t| t[i] = base - h)?;
        let down = shifted.forward(c, z)?.0;
        shifted.update_theta(|t| t[i] = base)?;
        record(Wrt::Theta, i, a, loss_delta(x, &up, &down, mask) / (2.0 * h));
    }
    let mut zs = z.clone();
    for (i, &a) in grad_z.iter().enumerate() {
        zs[i] = z[i] + h;
        let up = params.forward(c, &zs)?.0;
        zs[i] = z[i] - h;
        let down = params.forward(c, &zs)?.0;
        zs[i] = z[i];
        record(Wrt::Z, i, a, loss_delta(x, &up, &down, mask) / (2.0 * h));
    }
    Ok(())
}

/// Runs `cfg.configs` random networks, each checked masked and unmasked.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.configs == 0 || cfg.max_dim == 0 {
        return Err(AbpError::Config("gradcheck needs configs >= 1 and max_dim >= 1".into()));
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0) {
        return Err(AbpError::Config("gradcheck step, tolerance and floor must be > 0".into()));
    }
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut report = GradcheckReport::default();
    for index in 0..cfg.configs {
        let case = draw_case(&mut rng, cfg.max_dim)?;
        check_case(&case, index, false, cfg, &mut report)?;
        check_case(&case, index, true, cfg, &mut report)?;
        report.configs_run += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report.worst);
        assert_eq!(report.configs_run, 10);
        assert!(report.coordinates_checked > 100);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a tolerance nobody meets must produce failures
        let cfg = GradcheckConfig {
            configs: 1,
            tolerance: 1e-30,
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GradcheckConfig {
            configs: 0,
            ..GradcheckConfig::default()
        };
        assert!(run_gradcheck(&cfg).is_err());
    }
}

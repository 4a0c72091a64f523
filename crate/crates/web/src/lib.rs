//! Browser bindings: a Langevin posterior sampler on the scalar linear model,
//! a small 2-D feature translator trained in the page, and the GZSL harmonic
//! mean.

use abp_core::dataio::{gen_synth, Dataset, SynthSpec};
use abp_core::evalkit::{eval_zsl, harmonic_mean as hm, synthesize, EvalConfig, SynthOptions};
use abp_core::generator::{Activation, Dims, ModelParams};
use abp_core::inference::{run_chain, LangevinConfig};
use abp_core::numerics::RngStream;
use abp_core::trainer::{TrainConfig, TrainState};
use wasm_bindgen::prelude::*;

/// `2 s u / (s + u)`, or 0 when both are 0.
#[wasm_bindgen]
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    hm(seen, unseen)
}

/// Histogram of Langevin samples next to the exact Gaussian posterior.
#[wasm_bindgen]
pub struct PosteriorSample {
    centers: Vec<f64>,
    density: Vec<f64>,
    exact: Vec<f64>,
    mean: f64,
    var: f64,
    exact_mean: f64,
    exact_var: f64,
}

#[wasm_bindgen]
impl PosteriorSample {
    /// Bin centres.
    pub fn centers(&self) -> Vec<f64> {
        self.centers.clone()
    }

    /// Empirical density per bin (integrates to 1).
    pub fn density(&self) -> Vec<f64> {
        self.density.clone()
    }

    /// Exact posterior density at each bin centre.
    pub fn exact(&self) -> Vec<f64> {
        self.exact.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mean(&self) -> f64 {
        self.mean
    }

    #[wasm_bindgen(getter)]
    pub fn var(&self) -> f64 {
        self.var
    }

    #[wasm_bindgen(getter)]
    pub fn exact_mean(&self) -> f64 {
        self.exact_mean
    }

    #[wasm_bindgen(getter)]
    pub fn exact_var(&self) -> f64 {
        self.exact_var
    }
}

/// Runs a chain on `x = a c + b z + ε`, `z ~ N(0, 1)`, `ε ~ N(0, σ²)`, and
/// bins the samples. Each sample is `steps_per_sample` Langevin updates.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sample_posterior(
    a: f64,
    b: f64,
    sigma: f64,
    c: f64,
    x: f64,
    step_size: f64,
    steps_per_sample: usize,
    samples: usize,
    bins: usize,
    seed: u64,
) -> Result<PosteriorSample, String> {
    if samples < 2 || bins == 0 {
        return Err("need at least 2 samples and 1 bin".into());
    }
    let params = ModelParams::new(
        Dims::new(1, 1, 1, 1),
        Activation::Identity,
        Activation::Identity,
        sigma,
        vec![a, b, 0.0, 1.0, 0.0],
    )
    .map_err(|e| e.to_string())?;
    let cfg = LangevinConfig {
        steps: steps_per_sample,
        step_size,
        noise_enabled: true,
        sigma,
    };
    cfg.validate().map_err(|e| e.to_string())?;

    let exact_var = 1.0 / (b * b / (sigma * sigma) + 1.0);
    let exact_mean = b * (x - a * c) / (sigma * sigma) * exact_var;

    let mut rng = RngStream::new(seed, 2);
    let mut z = vec![0.0];
    for _ in 0..samples / 10 {
        z = run_chain(&params, &[c], &[x], &z, &cfg, &mut rng, None).map_err(|e| e.to_string())?;
    }
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        z = run_chain(&params, &[c], &[x], &z, &cfg, &mut rng, None).map_err(|e| e.to_string())?;
        draws.push(z[0]);
    }
    let mean = draws.iter().sum::<f64>() / samples as f64;
    let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples as f64;

    let sd = exact_var.sqrt();
    let (lo, hi) = (exact_mean - 4.0 * sd, exact_mean + 4.0 * sd);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &draws {
        let i = ((v - lo) / width).floor();
        if i >= 0.0 && (i as usize) < bins {
            counts[i as usize] += 1;
        }
    }
    let centers: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let density = counts.iter().map(|&n| n as f64 / (samples as f64 * width)).collect();
    let exact = centers
        .iter()
        .map(|&t| (-(t - exact_mean).powi(2) / (2.0 * exact_var)).exp() / (2.0 * std::f64::consts::PI * exact_var).sqrt())
        .collect();
    Ok(PosteriorSample {
        centers,
        density,
        exact,
        mean,
        var,
        exact_mean,
        exact_var,
    })
}

/// A synthetic dataset with 2-D visual features and a generator trained on
/// it one epoch at a time.
#[wasm_bindgen]
pub struct ToyTranslator {
    data: Dataset,
    state: TrainState,
    seed: u64,
    last_loss: f64,
}

#[wasm_bindgen]
impl ToyTranslator {
    #[wasm_bindgen(constructor)]
    pub fn new(num_seen: usize, num_unseen: usize, seed: u64) -> Result<ToyTranslator, String> {
        let spec = SynthSpec {
            num_seen,
            num_unseen,
            per_class_train: 40,
            per_class_test: 40,
            attr_dim: 4,
            latent_dim: 1,
            visual_dim: 2,
            teacher_hidden: 16,
            teacher_attr_gain: 6.0,
            sigma: 0.1,
            seed,
            ..SynthSpec::default()
        };
        let (data, _) = gen_synth(&spec).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 32,
            learning_rate: 1e-2,
            latent_dim: 1,
            hidden: 32,
            output_act: Activation::Identity,
            langevin: LangevinConfig {
                sigma: 0.1,
                step_size: 0.1,
                ..LangevinConfig::default()
            },
            seed,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&data, cfg).map_err(|e| e.to_string())?;
        Ok(ToyTranslator {
            data,
            state,
            seed,
            last_loss: f64::NAN,
        })
    }

    /// Runs `epochs` more epochs; returns the last epoch's mean squared residual.
    pub fn train(&mut self, epochs: usize) -> Result<f64, String> {
        for _ in 0..epochs {
            self.last_loss = self.state.run_epoch(&self.data).map_err(|e| e.to_string())?.loss;
        }
        Ok(self.last_loss)
    }

    #[wasm_bindgen(getter)]
    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[wasm_bindgen(getter)]
    pub fn loss(&self) -> f64 {
        self.last_loss
    }

    #[wasm_bindgen(getter)]
    pub fn num_seen(&self) -> usize {
        self.data.seen_classes.len()
    }

    /// Flattened `[x, y, class, ...]` for every example of the chosen split:
    /// 0 = seen training, 1 = unseen test.
    pub fn real_points(&self, split: u8) -> Vec<f64> {
        let idx = if split == 0 {
            &self.data.train_idx
        } else {
            &self.data.test_unseen_idx
        };
        idx.iter()
            .flat_map(|&i| {
                let r = self.data.visual.row(i);
                [r[0], r[1], self.data.labels[i] as f64]
            })
            .collect()
    }

    /// Flattened `[x, y, class, ...]` synthesized for the unseen classes.
    pub fn synth_points(&self, per_class: usize) -> Result<Vec<f64>, String> {
        let opts = SynthOptions {
            per_class,
            ..SynthOptions::default()
        };
        let mut rng = RngStream::new(self.seed, 3);
        let set = synthesize(&self.state.params, &self.data.attrs, &self.data.unseen_classes, &opts, &mut rng)
            .map_err(|e| e.to_string())?;
        Ok(set
            .features
            .iter_rows()
            .zip(&set.labels)
            .flat_map(|(r, &l)| [r[0], r[1], l as f64])
            .collect())
    }

    /// ZSL top-1 on the unseen test points.
    pub fn zsl_accuracy(&self, per_class: usize, k: usize) -> Result<f64, String> {
        let cfg = EvalConfig {
            per_class,
            k,
            seed: self.seed,
            ..EvalConfig::default()
        };
        eval_zsl(&self.state.params, &self.data, &cfg)
            .map(|r| r.top1)
            .map_err(|e| e.to_string())
    }
}

//! Learning back-propagation and the alternating training loop.
//!
//! Each minibatch first advances the Langevin chains of its examples (warm
//! started from the latent bank), then takes one Adam step on the summed
//! complete-data log-likelihood gradient
//! `sum_i (1/σ²) (m_i ∘ (x_i - g(c_i, z_i)))ᵀ ∂g/∂θ`.


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{AbpError, Result};
use crate::generator::{Activation, Dims, Gradient, ModelParams};
use crate::inference::{infer_batch, residual, LangevinConfig, LatentBank};
use crate::numerics::{squared_norm, RngStreams};

/// Examples per parallel work unit in [`batch_gradient`]. Fixed so that the
/// floating-point summation order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// Wall-clock timer for the log. There is no clock on bare wasm32, so it
/// reads zero there.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub langevin: LangevinConfig,
    pub seed: u64,
    pub masked: bool,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_act: Activation,
    pub output_act: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            langevin: LangevinConfig::default(),
            seed: 0,
            masked: false,
            latent_dim: 10,
            hidden: 4096,
            hidden_act: Activation::leaky(),
            output_act: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AbpError::Config(msg));
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad(format!("adam beta1 must be in (0, 1), got {}", self.adam_beta1));
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad(format!("adam beta2 must be in (0, 1), got {}", self.adam_beta2));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("latent and hidden dimensions must be >= 1".into());
        }
        self.langevin.validate()
    }

    pub fn sigma(&self) -> f64 {
        self.langevin.sigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moment estimates, flat like the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

/// One Adam step along `grad`, which is an ascent direction of the
/// log-likelihood.
pub fn adam_update(
    params: &mut ModelParams,
    grad: &Gradient,
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    let n = params.theta().len();
    if grad.values().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(AbpError::shape(
            "adam_update",
            n,
            format!("grad {}, m {}, v {}", grad.values().len(), state.m.len(), state.v.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let AdamState { m, v, .. } = state;
    params.update_theta(|theta| {
        for (((p, &g), m), v) in theta.iter_mut().zip(grad.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    })
}

/// One training example with its current latent vector.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub x: &'a [f64],
    pub c: &'a [f64],
    pub z: &'a [f64],
    pub mask: Option<&'a [f64]>,
}

fn chunk_gradient(params: &ModelParams, items: &[BatchItem]) -> Result<(Gradient, f64)> {
    let scale = 1.0 / (params.sigma() * params.sigma());
    let mut grad = Gradient::zeros(params.dims());
    let mut sq = 0.0;
    for it in items {
        let (g, trace) = params.forward(it.c, it.z)?;
        if it.x.len() != g.len() {
            return Err(AbpError::shape("batch features", g.len(), it.x.len()));
        }
        if let Some(m) = it.mask {
            if m.len() != g.len() {
                return Err(AbpError::shape("batch mask", g.len(), m.len()));
            }
        }
        let r = residual(it.x, &g, it.mask);
        sq += squared_norm(&r);
        params.accumulate_grad_theta(&trace, &r, scale, &mut grad)?;
    }
    Ok((grad, sq))
}

/// Summed log-likelihood gradient over the batch, plus the summed squared
/// (masked) residual norm.
pub fn batch_gradient(params: &ModelParams, batch: &[BatchItem]) -> Result<(Gradient, f64)> {
    let parts: Vec<Result<(Gradient, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_gradient(params, chunk))
        .collect();
    let mut grad = Gradient::zeros(params.dims());
    let mut sq = 0.0;
    for part in parts {
        let (g, s) = part?;
        grad.add_assign(&g);
        sq += s;
    }
    if !sq.is_finite() || grad.values().iter().any(|v| !v.is_finite()) {
        return Err(AbpError::NonFinite("batch loss".into()));
    }
    Ok((grad, sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training examples of the squared (masked) residual norm.
    pub loss: f64,
    pub mean_z_sq: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub bank: LatentBank,
    pub adam: AdamState,
    pub rng: RngStreams,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.train_idx.is_empty() {
            return Err(AbpError::Invalid("dataset has no training examples".into()));
        }
        if config.masked && dataset.mask.is_none() {
            return Err(AbpError::Config("masked training requested but the dataset has no mask".into()));
        }
        let mut rng = RngStreams::new(config.seed);
        let dims = Dims::new(dataset.attr_dim(), config.latent_dim, config.hidden, dataset.visual_dim());
        let params = ModelParams::init_with(&mut rng.init, dims, config.hidden_act, config.output_act, config.sigma())?;
        let bank = LatentBank::init(&mut rng.init, dataset.train_idx.len(), config.latent_dim);
        let adam = AdamState::new(dims.param_count());
        Ok(TrainState {
            params,
            bank,
            adam,
            rng,
            epoch: 0,
            config,
        })
    }

    fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let d = self.params.dims();
        if d.cond != dataset.attr_dim() || d.visual != dataset.visual_dim() {
            return Err(AbpError::shape(
                "dataset vs model",
                format!("K = {}, D = {}", d.cond, d.visual),
                format!("K = {}, D = {}", dataset.attr_dim(), dataset.visual_dim()),
            ));
        }
        if self.bank.len() != dataset.train_idx.len() {
            return Err(AbpError::shape("latent bank rows", dataset.train_idx.len(), self.bank.len()));
        }
        Ok(())
    }

    /// Runs one pass over the training set.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        self.check_compatible(dataset)?;
        let start = Stopwatch::start();
        let cfg = self.config.clone();
        let hyper = AdamHyper::from(&cfg);
        let mut order: Vec<usize> = (0..dataset.train_idx.len()).collect();
        self.rng.shuffle.shuffle(&mut order);

        let mut total_sq = 0.0;
        for positions in order.chunks(cfg.batch_size) {
            infer_batch(
                &self.params,
                dataset,
                &mut self.bank,
                positions,
                &cfg.langevin,
                &mut self.rng.langevin,
                cfg.masked,
            )?;
            let items: Vec<BatchItem> = positions
                .iter()
                .map(|&p| {
                    let i = dataset.train_idx[p];
                    BatchItem {
                        x: dataset.visual.row(i),
                        c: dataset.attrs.row(dataset.labels[i]),
                        z: self.bank.row(p),
                        mask: if cfg.masked {
                            dataset.mask.as_ref().map(|m| m.row(i))
                        } else {
                            None
                        },
                    }
                })
                .collect();
            let (grad, sq) = batch_gradient(&self.params, &items)?;
            total_sq += sq;
            adam_update(&mut self.params, &grad, &mut self.adam, &hyper, cfg.learning_rate)?;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            loss: total_sq / dataset.train_idx.len() as f64,
            mean_z_sq: self.bank.mean_squared_norm(),
            seconds: start.seconds(),
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run<F>(&mut self, dataset: &Dataset, mut on_epoch: F) -> Result<TrainLog>
    where
        F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
    {
        let mut log = TrainLog::default();
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(dataset)?;
            on_epoch(self, &rec)?;
            log.records.push(rec);
        }
        Ok(log)
    }
}

/// Full alternating back-propagation run from a fresh initialization.
pub fn train(dataset: &Dataset, cfg: TrainConfig) -> Result<(ModelParams, LatentBank, TrainLog)> {
    let mut state = TrainState::new(dataset, cfg)?;
    let log = state.run(dataset, |_, _| Ok(()))?;
    Ok((state.params, state.bank, log))
}

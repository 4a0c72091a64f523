//! Conditional generator `x = g(c, z) + ε` trained by alternating
//! back-propagation: Langevin inference of the latent `z` per example,
//! then an Adam step on the generator weights. Trained models synthesize
//! features for unseen classes, which are then classified by KNN (ZSL) or
//! softmax (GZSL).

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod gradcheck;
pub mod inference;
pub mod numerics;
pub mod trainer;

pub use dataio::{gen_synth, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Dataset, SynthSpec};
pub use error::{AbpError, Result};
pub use evalkit::{eval_gzsl, eval_zsl, harmonic_mean, knn_classify, EvalConfig, EvalReport};
pub use generator::{Activation, Dims, ModelParams};
pub use inference::{LangevinConfig, LatentBank};
pub use numerics::{Matrix, RngStream, RngStreams};
pub use trainer::{train, TrainConfig, TrainState};

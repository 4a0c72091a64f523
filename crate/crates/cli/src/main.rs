//! `abp`: generate data, train, evaluate and check gradients from the shell.
//!
//! Results go to stdout as JSON or CSV; progress and errors go to stderr.
//! Exit codes: 0 success, 1 input/output failure, 2 usage or configuration
//! error, 3 numerical invariant or gradient-check failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abp_core::dataio::{gen_synth, import_csv, load_checkpoint, load_dataset, save_checkpoint, save_dataset, SynthSpec};
use abp_core::evalkit::{eval_gzsl, eval_zsl, EvalConfig, SoftmaxConfig};
use abp_core::generator::Activation;
use abp_core::gradcheck::{run_gradcheck, GradcheckConfig};
use abp_core::inference::LangevinConfig;
use abp_core::trainer::{TrainConfig, TrainState};
use abp_core::AbpError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "abp", version, about = "Alternating back-propagation feature translator for zero-shot learning")]
struct Cli {
    /// Worker threads (default: ABP_THREADS, else all cores).
    #[arg(long, global = true, env = "ABP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from a random teacher generator.
    GenSynth(GenSynthArgs),
    /// Train a generator, writing checkpoints and a per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    Eval(EvalArgs),
    /// ZSL top-1 for several synthesis counts, as CSV.
    SweepSynthCount(SweepArgs),
    /// Finite-difference check of the analytic gradients on random small nets.
    Gradcheck(GradcheckArgs),
    /// Convert CSV/JSON exports of a released benchmark into a dataset directory.
    ImportCsv(ImportArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    num_seen: usize,
    #[arg(long, default_value_t = 5)]
    num_unseen: usize,
    #[arg(long, default_value_t = 50)]
    per_class_train: usize,
    #[arg(long, default_value_t = 100)]
    per_class_test: usize,
    #[arg(long, default_value_t = 16)]
    attr_dim: usize,
    #[arg(long, default_value_t = 10)]
    latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    visual_dim: usize,
    #[arg(long, default_value_t = 64)]
    teacher_hidden: usize,
    #[arg(long, default_value_t = 3.5)]
    teacher_attr_gain: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_ratio: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActArg {
    Relu,
    LeakyRelu,
    Identity,
}

impl From<ActArg> for Activation {
    fn from(a: ActArg) -> Self {
        match a {
            ActArg::Relu => Activation::Relu,
            ActArg::LeakyRelu => Activation::leaky(),
            ActArg::Identity => Activation::Identity,
        }
    }
}

/// Training knobs. All optional so that a resumed run can tell which ones
/// were given explicitly.
#[derive(Args, Debug, Default)]
struct TrainKnobs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Langevin steps per iteration.
    #[arg(long, visible_alias = "steps")]
    langevin_steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Drop the Brownian term (deterministic gradient ascent on the latents).
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_enum)]
    hidden_act: Option<ActArg>,
    #[arg(long, value_enum)]
    output_act: Option<ActArg>,
    /// Use the dataset's visibility mask in the loss.
    #[arg(long)]
    masked: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainKnobs {
    fn any_given(&self) -> Option<&'static str> {
        [
            (self.batch_size.is_some(), "--batch-size"),
            (self.learning_rate.is_some(), "--learning-rate"),
            (self.adam_beta1.is_some(), "--adam-beta1"),
            (self.adam_beta2.is_some(), "--adam-beta2"),
            (self.adam_eps.is_some(), "--adam-eps"),
            (self.langevin_steps.is_some(), "--langevin-steps"),
            (self.step_size.is_some(), "--step-size"),
            (self.no_noise, "--no-noise"),
            (self.sigma.is_some(), "--sigma"),
            (self.latent_dim.is_some(), "--latent-dim"),
            (self.hidden.is_some(), "--hidden"),
            (self.hidden_act.is_some(), "--hidden-act"),
            (self.output_act.is_some(), "--output-act"),
            (self.masked, "--masked"),
            (self.seed.is_some(), "--seed"),
        ]
        .into_iter()
        .find(|(given, _)| *given)
        .map(|(_, name)| name)
    }

    fn to_config(&self, epochs: usize) -> TrainConfig {
        let d = TrainConfig::default();
        let dl = LangevinConfig::default();
        let sigma = self.sigma.unwrap_or(dl.sigma);
        TrainConfig {
            epochs,
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            adam_beta1: self.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            langevin: LangevinConfig {
                steps: self.langevin_steps.unwrap_or(dl.steps),
                step_size: self.step_size.unwrap_or(dl.step_size),
                noise_enabled: !self.no_noise,
                sigma,
            },
            seed: self.seed.unwrap_or(d.seed),
            masked: self.masked,
            latent_dim: self.latent_dim.unwrap_or(d.latent_dim),
            hidden: self.hidden.unwrap_or(d.hidden),
            hidden_act: self.hidden_act.map_or(d.hidden_act, Into::into),
            output_act: self.output_act.map_or(d.output_act, Into::into),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Total epochs (when resuming, the epoch count to reach).
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also keep epoch-NNNN.ckpt every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    keep_every: usize,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Zsl,
    Gzsl,
}

#[derive(Args, Debug)]
struct EvalKnobs {
    /// Synthesized features per unseen class.
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    /// Neighbours for ZSL.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthesize g(c, z) without observation noise.
    #[arg(long)]
    no_noise: bool,
    #[arg(long, default_value_t = 500)]
    softmax_iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    softmax_step_scale: f64,
}

impl EvalKnobs {
    fn to_config(&self) -> EvalConfig {
        EvalConfig {
            per_class: self.per_class,
            k: self.k,
            seed: self.seed,
            noise: !self.no_noise,
            softmax: SoftmaxConfig {
                step_scale: self.softmax_step_scale,
                iterations: self.softmax_iterations,
            },
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(value_enum)]
    mode: Mode,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,200,300")]
    counts: Vec<usize>,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    configs: usize,
    #[arg(long, default_value_t = 16)]
    max_dim: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    attrs: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(AbpError),
    Usage(String),
    Check(String),
}

impl From<AbpError> for Failure {
    fn from(e: AbpError) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(AbpError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn cmd_gen_synth(a: GenSynthArgs) -> CmdResult {
    let spec = SynthSpec {
        num_seen: a.num_seen,
        num_unseen: a.num_unseen,
        per_class_train: a.per_class_train,
        per_class_test: a.per_class_test,
        attr_dim: a.attr_dim,
        latent_dim: a.latent_dim,
        visual_dim: a.visual_dim,
        teacher_hidden: a.teacher_hidden,
        teacher_attr_gain: a.teacher_attr_gain,
        sigma: a.sigma,
        missing_ratio: a.missing_ratio,
        seed: a.seed,
    };
    let (ds, teacher) = gen_synth(&spec)?;
    save_dataset(&ds, &a.out)?;
    let teacher_path = a.out.join("teacher.json");
    let text = serde_json::to_string(&teacher).expect("teacher serializes");
    fs::write(&teacher_path, text).map_err(|e| io_err(&teacher_path, e))?;
    print_json(&json!({
        "out": a.out,
        "n": ds.n(),
        "train": ds.train_idx.len(),
        "test_seen": ds.test_seen_idx.len(),
        "test_unseen": ds.test_unseen_idx.len(),
        "has_mask": ds.mask.is_some(),
    }));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let mut state = match &a.resume {
        Some(path) => {
            if let Some(flag) = a.knobs.any_given() {
                return Err(Failure::Usage(format!("{flag} cannot be changed when resuming; the checkpoint's configuration is used")));
            }
            let mut s = load_checkpoint(path)?;
            if a.epochs < s.epoch {
                return Err(Failure::Usage(format!("--epochs {} is below the checkpoint's {} completed epochs", a.epochs, s.epoch)));
            }
            s.config.epochs = a.epochs;
            eprintln!("resuming from {} at epoch {}", path.display(), s.epoch);
            s
        }
        None => TrainState::new(&ds, a.knobs.to_config(a.epochs))?,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let log_path = a.out.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let latest = a.out.join("latest.ckpt");

    let result = state.run(&ds, |s, rec| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  mean |z|^2 {:.3}  {:.2}s",
            rec.epoch, rec.loss, rec.mean_z_sq, rec.seconds
        );
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| AbpError::Io {
            path: log_path.clone(),
            source: e,
        })?;
        save_checkpoint(s, &latest)?;
        if a.keep_every > 0 && rec.epoch % a.keep_every == 0 {
            save_checkpoint(s, a.out.join(format!("epoch-{:04}.ckpt", rec.epoch)))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        eprintln!("training stopped during epoch {}; latest.ckpt holds the last completed epoch", state.epoch + 1);
        return Err(e.into());
    }
    let final_path = a.out.join("final.ckpt");
    save_checkpoint(&state, &final_path)?;
    print_json(&json!({
        "epochs": state.epoch,
        "checkpoint": final_path,
        "log": log_path,
        "config": state.config,
    }));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let cfg = a.knobs.to_config();
    let report = match a.mode {
        Mode::Zsl => eval_zsl(&state.params, &ds, &cfg)?,
        Mode::Gzsl => eval_gzsl(&state.params, &ds, &cfg)?,
    };
    print_json(&report);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    if a.counts.is_empty() || a.counts.contains(&0) {
        return Err(Failure::Usage("--counts needs positive integers".into()));
    }
    let ds = load_dataset(&a.data)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let base = a.knobs.to_config();
    let mut out = String::from("per_class,top1\n");
    for &per_class in &a.counts {
        let report = eval_zsl(&state.params, &ds, &EvalConfig { per_class, ..base })?;
        eprintln!("per_class {per_class}: top-1 {:.4}", report.top1);
        out.push_str(&format!("{per_class},{}\n", report.top1));
    }
    print!("{out}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        configs: a.configs,
        max_dim: a.max_dim,
        step: a.step,
        tolerance: a.tolerance,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    print_json(&report);
    if report.passed() {
        eprintln!(
            "{} coordinates over {} configurations, max relative error {:.3e}",
            report.coordinates_checked, report.configs_run, report.max_rel_error
        );
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} coordinates exceed relative error {}",
            report.failures.len(),
            report.coordinates_checked,
            cfg.tolerance
        )))
    }
}

fn cmd_import(a: ImportArgs) -> CmdResult {
    let ds = import_csv(&a.features, &a.labels, &a.attrs, &a.split)?;
    save_dataset(&ds, &a.out)?;
    print_json(&json!({ "out": a.out, "n": ds.n(), "D": ds.visual_dim(), "K": ds.attr_dim() }));
    Ok(())
}

fn exit_code(e: &AbpError) -> u8 {
    if e.is_io() {
        1
    } else if matches!(e, AbpError::Config(_)) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepSynthCount(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ImportCsv(a) => cmd_import(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

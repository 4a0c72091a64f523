//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use abp_core::dataio::{encode_checkpoint, load_checkpoint, save_checkpoint};
use abp_core::evalkit::{eval_zsl, harmonic_mean, knn_classify, EvalConfig};
use abp_core::generator::{Activation, Dims, ModelParams};
use abp_core::gradcheck::{run_gradcheck, GradcheckConfig};
use abp_core::inference::{run_chain, LangevinConfig};
use abp_core::numerics::{gaussian, Matrix, RngStream};
use abp_core::trainer::{TrainConfig, TrainState};
use abp_core::{gen_synth, Dataset, SynthSpec};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    out.detail = format!("{} [{:.1}s]", out.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            out.pass = false;
            out.detail = format!("{} exceeds {:.0}s limit", out.detail, limit.as_secs_f64());
        }
    }
    out
}

// -- frozen teacher-student benchmark --------------------------------------

/// Student settings fixed after the single calibration run.
fn student_config() -> TrainConfig {
    TrainConfig {
        hidden: 256,
        ..TrainConfig::default()
    }
}

const CHANCE: f64 = 0.2;
const TRAINED_THRESHOLD: f64 = 3.0 * CHANCE;

fn zsl_top1(params: &ModelParams, ds: &Dataset, per_class: usize) -> f64 {
    let cfg = EvalConfig {
        per_class,
        ..EvalConfig::default()
    };
    eval_zsl(params, ds, &cfg).expect("eval_zsl").top1
}

// -- 1 ----------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let cfg = GradcheckConfig::default();
    let report = run_gradcheck(&cfg).expect("gradcheck runs");
    Outcome::new(
        report.passed() && report.configs_run >= 10 && cfg.max_dim <= 16 && cfg.tolerance <= 1e-6,
        format!(
            "{} configs, {} coordinates, max rel error {:.2e}, {} violations",
            report.configs_run,
            report.coordinates_checked,
            report.max_rel_error,
            report.failures.len()
        ),
    )
}

// -- 2 ----------------------------------------------------------------------

fn langevin_posterior() -> Outcome {
    // z ~ N(0,1), x | z ~ N(a c + b z, σ²): posterior N(mu, v) in closed form
    let (a, b, sigma, c, x) = (0.8_f64, 1.0_f64, 1.0_f64, 1.0_f64, 2.0_f64);
    let v = 1.0 / (b * b / (sigma * sigma) + 1.0);
    let mu = b * (x - a * c) / (sigma * sigma) * v;

    let params = ModelParams::new(
        Dims::new(1, 1, 1, 1),
        Activation::Identity,
        Activation::Identity,
        sigma,
        vec![a, b, 0.0, 1.0, 0.0],
    )
    .unwrap();
    // each recorded sample is 20 small Langevin steps
    let cfg = LangevinConfig {
        steps: 20,
        step_size: 0.15,
        noise_enabled: true,
        sigma,
    };
    let mut rng = RngStream::new(7, 2);
    let mut z = vec![0.0];
    for _ in 0..1_000 {
        z = run_chain(&params, &[c], &[x], &z, &cfg, &mut rng, None).unwrap();
    }
    let n = 50_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        z = run_chain(&params, &[c], &[x], &z, &cfg, &mut rng, None).unwrap();
        s1 += z[0];
        s2 += z[0] * z[0];
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    let (em, ev) = ((mean / mu - 1.0).abs(), (var / v - 1.0).abs());
    Outcome::new(
        em < 0.05 && ev < 0.05,
        format!("mean {mean:.4} vs {mu:.4} ({:.2}%), var {var:.4} vs {v:.4} ({:.2}%)", em * 100.0, ev * 100.0),
    )
}

// -- 3 ----------------------------------------------------------------------

/// Draws data from a linear Gaussian teacher `x = A c + B z + b + ε`.
fn linear_dataset() -> Dataset {
    let (k, d, dv, sigma) = (4, 2, 6, 0.3);
    let (seen, unseen, per_train, per_test) = (10, 2, 30, 5);
    let mut rng = RngStream::new(99, 0);
    let a = gaussian(&mut rng, dv * k, 0.0, 1.0);
    let bm = gaussian(&mut rng, dv * d, 0.0, 0.7);
    let bias = gaussian(&mut rng, dv, 1.0, 0.5);
    let attrs = Matrix::from_vec(seen + unseen, k, gaussian(&mut rng, (seen + unseen) * k, 0.0, 1.0)).unwrap();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut draw = |class: usize, rng: &mut RngStream| {
        let c = attrs.row(class);
        let z = gaussian(rng, d, 0.0, 1.0);
        for i in 0..dv {
            let mut v = bias[i] + sigma * rng.standard_normal();
            v += (0..k).map(|j| a[i * k + j] * c[j]).sum::<f64>();
            v += (0..d).map(|j| bm[i * d + j] * z[j]).sum::<f64>();
            rows.push(v);
        }
        labels.push(class);
    };
    for class in 0..seen {
        for _ in 0..per_train {
            draw(class, &mut rng);
        }
    }
    for class in seen..seen + unseen {
        for _ in 0..per_test {
            draw(class, &mut rng);
        }
    }
    let n_train = seen * per_train;
    let ds = Dataset {
        visual: Matrix::from_vec(labels.len(), dv, rows).unwrap(),
        attrs,
        labels: labels.clone(),
        seen_classes: (0..seen).collect(),
        unseen_classes: (seen..seen + unseen).collect(),
        train_idx: (0..n_train).collect(),
        test_seen_idx: Vec::new(),
        test_unseen_idx: (n_train..labels.len()).collect(),
        mask: None,
    };
    ds.validate().unwrap();
    ds
}

/// Mean exact log-likelihood of the training rows under the linear model
/// `x | c ~ N(A c + b, B Bᵀ + σ² I)` read off the identity-activation network.
fn exact_loglik(params: &ModelParams, ds: &Dataset) -> f64 {
    let dims = params.dims();
    let (k, d, h, dv) = (dims.cond, dims.latent, dims.hidden, dims.visual);
    let w1 = DMatrix::from_row_slice(k + d, h, params.w1());
    let w2 = DMatrix::from_row_slice(h, dv, params.w2());
    let full = (&w1 * &w2).transpose();
    let a = full.columns(0, k).into_owned();
    let b = full.columns(k, d).into_owned();
    let offset = w2.transpose() * DVector::from_row_slice(params.b1()) + DVector::from_row_slice(params.b2());
    let s2 = params.sigma() * params.sigma();
    let cov = &b * b.transpose() + DMatrix::identity(dv, dv) * s2;
    let chol = cov.cholesky().expect("covariance is positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let norm = dv as f64 * (2.0 * std::f64::consts::PI).ln() + log_det;
    let total: f64 = ds
        .train_idx
        .iter()
        .map(|&i| {
            let c = DVector::from_row_slice(ds.attrs.row(ds.labels[i]));
            let r = DVector::from_row_slice(ds.visual.row(i)) - &a * c - &offset;
            let q = r.dot(&chol.solve(&r));
            -0.5 * (norm + q)
        })
        .sum();
    total / ds.train_idx.len() as f64
}

fn likelihood_ascent() -> Outcome {
    let ds = linear_dataset();
    let cfg = TrainConfig {
        epochs: 100,
        latent_dim: 2,
        hidden: 8,
        hidden_act: Activation::Identity,
        output_act: Activation::Identity,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&ds, cfg).unwrap();
    let mut trace = vec![(0, exact_loglik(&state.params, &ds))];
    state
        .run(&ds, |s, rec| {
            if rec.epoch % 5 == 0 {
                trace.push((rec.epoch, exact_loglik(&s.params, &ds)));
            }
            Ok(())
        })
        .unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut worst_drop = 0.0_f64;
    for &(_, ll) in &trace {
        best = best.max(ll);
        worst_drop = worst_drop.max((best - ll) / best.abs());
    }
    let (first, last) = (trace[0].1, trace[trace.len() - 1].1);
    Outcome::new(
        worst_drop <= 0.02 && last > first,
        format!(
            "log-lik {first:.3} -> {last:.3} over {} checkpoints, worst relative drop {:.3}%",
            trace.len(),
            worst_drop * 100.0
        ),
    )
}

// -- 4 ----------------------------------------------------------------------

fn teacher_student(ds: &Dataset, untrained: &ModelParams, trained: &ModelParams) -> Outcome {
    let n_test = ds.test_unseen_idx.len() as f64;
    let band = 3.0 * (CHANCE * (1.0 - CHANCE) / n_test).sqrt();
    let before = zsl_top1(untrained, ds, 300);
    let after = zsl_top1(trained, ds, 300);
    Outcome::new(
        after > TRAINED_THRESHOLD && (before - CHANCE).abs() <= band,
        format!("trained {after:.3} (> {TRAINED_THRESHOLD:.1}), untrained {before:.3} (chance {CHANCE} ± {band:.3})"),
    )
}

// -- 5 ----------------------------------------------------------------------

fn harmonic_mean_anchor() -> Outcome {
    let h = harmonic_mean(47.0, 54.8);
    let same = [0.0, 0.25, 0.5, 1.0, 37.5].iter().all(|&x| (harmonic_mean(x, x) - x).abs() < 1e-12);
    let zero = [0.0, 0.3, 1.0, 54.8].iter().all(|&s| harmonic_mean(0.0, s) == 0.0);
    Outcome::new(
        (h - 50.6).abs() <= 0.05 && same && zero,
        format!("H(47.0, 54.8) = {h:.4}, H(x,x) = x: {same}, H(0,s) = 0: {zero}"),
    )
}

// -- 6 ----------------------------------------------------------------------

fn missing_ratio_trend(full_top1: f64) -> Outcome {
    let mut results = vec![(0.0, full_top1)];
    for ratio in [0.3, 0.5, 0.7, 0.9] {
        let spec = SynthSpec {
            missing_ratio: ratio,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synth(&spec).unwrap();
        let cfg = TrainConfig {
            masked: true,
            ..student_config()
        };
        let mut state = TrainState::new(&ds, cfg).unwrap();
        state.run(&ds, |_, _| Ok(())).unwrap();
        results.push((ratio, zsl_top1(&state.params, &ds, 300)));
    }
    let monotone = results.windows(2).all(|w| w[1].1 <= w[0].1 + 0.02);
    let last = results.last().unwrap().1;
    let listing: Vec<String> = results.iter().map(|(r, a)| format!("{r}: {a:.3}")).collect();
    Outcome::new(monotone && last > CHANCE, format!("top-1 by missing ratio {}", listing.join(", ")))
}

// -- 7 ----------------------------------------------------------------------

fn synth_count_trend(ds: &Dataset, trained: &ModelParams) -> Outcome {
    let counts = [1, 10, 50, 300];
    let acc: BTreeMap<usize, f64> = counts.iter().map(|&c| (c, zsl_top1(trained, ds, c))).collect();
    let monotone = counts.windows(2).all(|w| acc[&w[1]] >= acc[&w[0]] - 0.02);
    let early = acc[&50] - acc[&1];
    let late = acc[&300] - acc[&50];
    let listing: Vec<String> = acc.iter().map(|(c, a)| format!("{c}: {a:.3}")).collect();
    Outcome::new(
        monotone && late < early,
        format!("top-1 by per-class count {}; delta 1->50 {early:.3}, 50->300 {late:.3}", listing.join(", ")),
    )
}

// -- 8 ----------------------------------------------------------------------

fn determinism(ds: &Dataset, reference: &[u8]) -> Outcome {
    let mut again = TrainState::new(ds, student_config()).unwrap();
    again.run(ds, |_, _| Ok(())).unwrap();
    let same_seed = encode_checkpoint(&again) == reference;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch20.ckpt");
    let mut first = TrainState::new(
        ds,
        TrainConfig {
            epochs: 20,
            ..student_config()
        },
    )
    .unwrap();
    first.run(ds, |_, _| Ok(())).unwrap();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.config.epochs = resumed.epoch + 30;
    resumed.run(ds, |_, _| Ok(())).unwrap();
    let resumed_same = encode_checkpoint(&resumed) == reference;
    Outcome::new(
        same_seed && resumed_same,
        format!(
            "same seed identical: {same_seed}, 20 + resume 30 identical to 50: {resumed_same} ({} bytes)",
            reference.len()
        ),
    )
}

// -- 9 ----------------------------------------------------------------------

/// Full sort of all training points by (distance, index), then the vote.
fn knn_oracle(train: &Matrix, labels: &[usize], test: &Matrix, k: usize) -> Vec<usize> {
    (0..test.rows())
        .map(|t| {
            let mut all: Vec<(f64, usize)> = (0..train.rows())
                .map(|i| {
                    let d2: f64 = (0..train.cols()).map(|j| (test.get(t, j) - train.get(i, j)).powi(2)).sum();
                    (d2.sqrt(), i)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &(d, i) in &all[..k] {
                by_class.entry(labels[i]).or_default().push(d);
            }
            let top = by_class.values().map(Vec::len).max().unwrap();
            by_class
                .iter()
                .filter(|(_, ds)| ds.len() == top)
                .map(|(&c, ds)| (ds.iter().sum::<f64>() / ds.len() as f64, c))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap()
                .1
        })
        .collect()
}

fn knn_equivalence() -> Outcome {
    let mut rng = RngStream::new(2718, 0);
    let mut mismatches = 0;
    let mut queries = 0;
    for instance in 0..100 {
        let n = 1 + rng.below(500);
        let dim = 1 + rng.below(8);
        let classes = 2 + rng.below(5);
        let k = 1 + rng.below(n.min(30));
        // every other instance uses a coarse integer grid to force distance ties
        let grid = instance % 2 == 1;
        let feat = |rng: &mut RngStream, len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if grid { rng.below(4) as f64 } else { rng.standard_normal() })
                .collect()
        };
        let train = Matrix::from_vec(n, dim, feat(&mut rng, n * dim)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let m = 1 + rng.below(20);
        let test = Matrix::from_vec(m, dim, feat(&mut rng, m * dim)).unwrap();
        let got = knn_classify(&train, &labels, &test, k).unwrap();
        let want = knn_oracle(&train, &labels, &test, k);
        mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        queries += m;
    }
    Outcome::new(
        mismatches == 0,
        format!("100 instances, {queries} queries, {mismatches} disagreements"),
    )
}

fn main() {
    let mut outcomes: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, out: Outcome| {
        println!("{} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        outcomes.push((name, out));
    };

    report("1 gradient fidelity", timed(Some(Duration::from_secs(10)), gradient_fidelity));
    report("2 Langevin posterior oracle", timed(Some(Duration::from_secs(30)), langevin_posterior));
    report("3 exact-likelihood ascent", timed(Some(Duration::from_secs(120)), likelihood_ascent));

    let (ds, _) = gen_synth(&SynthSpec::default()).unwrap();
    let mut trained_state = None;
    report(
        "4 teacher-student ZSL",
        timed(Some(Duration::from_secs(300)), || {
            let mut state = TrainState::new(&ds, student_config()).unwrap();
            let untrained = state.params.clone();
            state.run(&ds, |_, _| Ok(())).unwrap();
            let out = teacher_student(&ds, &untrained, &state.params);
            trained_state = Some(state);
            out
        }),
    );
    let trained = trained_state.expect("criterion 4 trains the reference model");

    report("5 harmonic mean", timed(None, harmonic_mean_anchor));
    let full_top1 = zsl_top1(&trained.params, &ds, 300);
    report("6 missing-ratio trend", timed(None, || missing_ratio_trend(full_top1)));
    report("7 synthetic-count trend", timed(None, || synth_count_trend(&ds, &trained.params)));
    let reference = encode_checkpoint(&trained);
    report("8 determinism and resume", timed(None, || determinism(&ds, &reference)));
    report("9 KNN oracle equivalence", timed(None, knn_equivalence));

    let failed: Vec<&str> = outcomes.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

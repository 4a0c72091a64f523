//! Feature synthesis for unseen classes, classifiers, and ZSL / GZSL metrics.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{AbpError, Result};
use crate::generator::ModelParams;
use crate::numerics::{Matrix, RngStream, RngStreams};

/// Synthesized features and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub noise_included: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub per_class: usize,
    /// Add observation noise `N(0, σ² I)` to every feature.
    pub noise: bool,
    /// Std of the latent prior draws; 1 in normal use.
    pub latent_std: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            per_class: 300,
            noise: true,
            latent_std: 1.0,
        }
    }
}

/// Ancestral sampling `x = g(c, z) + ε` for each listed class. Also returns
/// the latent draws, one row per synthesized feature.
pub fn synthesize_traced(
    params: &ModelParams,
    attrs: &Matrix,
    classes: &[usize],
    opts: &SynthOptions,
    rng: &mut RngStream,
) -> Result<(SynthSet, Matrix)> {
    if opts.per_class == 0 {
        return Err(AbpError::Config("per-class synthesis count must be >= 1".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= attrs.rows()) {
        return Err(AbpError::Invalid(format!("class {c} has no attribute row")));
    }
    let dims = params.dims();
    let total = classes.len() * opts.per_class;
    let mut features = Vec::with_capacity(total * dims.visual);
    let mut latents = Vec::with_capacity(total * dims.latent);
    let mut labels = Vec::with_capacity(total);
    let mut z = vec![0.0; dims.latent];
    for &class in classes {
        for _ in 0..opts.per_class {
            rng.fill_gaussian(&mut z, 0.0, opts.latent_std);
            let (x, _) = params.forward(attrs.row(class), &z)?;
            if opts.noise {
                features.extend(x.iter().map(|v| v + params.sigma() * rng.standard_normal()));
            } else {
                features.extend_from_slice(&x);
            }
            latents.extend_from_slice(&z);
            labels.push(class);
        }
    }
    Ok((
        SynthSet {
            features: Matrix::from_vec(total, dims.visual, features)?,
            labels,
            noise_included: opts.noise,
        },
        Matrix::from_vec(total, dims.latent, latents)?,
    ))
}

pub fn synthesize(
    params: &ModelParams,
    attrs: &Matrix,
    classes: &[usize],
    opts: &SynthOptions,
    rng: &mut RngStream,
) -> Result<SynthSet> {
    synthesize_traced(params, attrs, classes, opts, rng).map(|(s, _)| s)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-nearest-neighbour majority vote with Euclidean distance.
///
/// Neighbours are ranked by distance, then by training index. A vote tie goes
/// to the class with the smaller mean neighbour distance, then to the smaller
/// class id.
pub fn knn_classify(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Result<Vec<usize>> {
    if train.rows() == 0 {
        return Err(AbpError::Invalid("knn_classify: empty training set".into()));
    }
    if train_labels.len() != train.rows() {
        return Err(AbpError::shape("knn labels", train.rows(), train_labels.len()));
    }
    if k == 0 || k > train.rows() {
        return Err(AbpError::Config(format!("k must be in 1..={}, got {k}", train.rows())));
    }
    if test.cols() != train.cols() {
        return Err(AbpError::shape("knn test features", train.cols(), test.cols()));
    }
    let rank = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    Ok((0..test.rows())
        .into_par_iter()
        .map(|t| {
            let q = test.row(t);
            let mut dist: Vec<(f64, usize)> = train.iter_rows().map(|r| euclidean(q, r)).zip(0..).collect();
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, rank);
                dist.truncate(k);
            }
            // class -> (votes, distance sum)
            let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(d, i) in &dist {
                let e = tally.entry(train_labels[i]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += d;
            }
            let mut best: Option<(usize, usize, f64)> = None;
            for (&class, &(votes, sum)) in &tally {
                let mean = sum / votes as f64;
                let better = match best {
                    None => true,
                    Some((_, bv, bm)) => votes > bv || (votes == bv && mean < bm),
                };
                if better {
                    best = Some((class, votes, mean));
                }
            }
            best.expect("k >= 1").0
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxConfig {
    /// Gradient step as a multiple of `1 / L`, where `L` bounds the curvature
    /// of the loss on the standardized training features.
    pub step_scale: f64,
    pub iterations: usize,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig {
            step_scale: 1.0,
            iterations: 500,
        }
    }
}

/// Rows per parallel work unit in the softmax gradient.
const SOFTMAX_CHUNK: usize = 64;

/// Linear softmax regression trained by full-batch gradient descent on the
/// mean cross-entropy. Features are standardized with training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// D x C, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Largest eigenvalue of the second-moment matrix of `[x, 1]`, by power
/// iteration. Rows are already standardized.
fn top_eigenvalue(rows: &[Vec<f64>]) -> f64 {
    let dim = rows[0].len() + 1;
    let mut m = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            let ri = if i + 1 == dim { 1.0 } else { r[i] };
            for j in 0..dim {
                let rj = if j + 1 == dim { 1.0 } else { r[j] };
                m[i * dim + j] += ri * rj;
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w: Vec<f64> = (0..dim).map(|i| m[i * dim..(i + 1) * dim].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

impl SoftmaxClassifier {
    pub fn fit(train: &Matrix, labels: &[usize], cfg: &SoftmaxConfig) -> Result<Self> {
        if labels.len() != train.rows() {
            return Err(AbpError::shape("softmax labels", train.rows(), labels.len()));
        }
        if cfg.step_scale.is_nan() || cfg.step_scale <= 0.0 {
            return Err(AbpError::Config("softmax step_scale must be > 0".into()));
        }
        let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(AbpError::Invalid("softmax classifier needs at least 2 classes".into()));
        }
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let targets: Vec<usize> = labels.iter().map(|l| index[l]).collect();
        let (n, dim, nc) = (train.rows(), train.cols(), classes.len());

        let mut mean = vec![0.0; dim];
        for r in train.iter_rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; dim];
        for r in train.iter_rows() {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { 1.0 / s.sqrt() } else { 1.0 });

        let mut model = SoftmaxClassifier {
            classes,
            mean,
            scale,
            weights: vec![0.0; dim * nc],
            bias: vec![0.0; nc],
        };
        let rows: Vec<Vec<f64>> = train.iter_rows().map(|r| model.standardize(r)).collect();
        // the cross-entropy Hessian is bounded by half the second moment of [x, 1]
        let lipschitz = 0.5 * top_eigenvalue(&rows);
        let step = cfg.step_scale / lipschitz.max(f64::MIN_POSITIVE) / n as f64;

        for _ in 0..cfg.iterations {
            let parts: Vec<(Vec<f64>, Vec<f64>, f64)> = rows
                .par_chunks(SOFTMAX_CHUNK)
                .zip(targets.par_chunks(SOFTMAX_CHUNK))
                .map(|(chunk, tchunk)| {
                    let mut gw = vec![0.0; dim * nc];
                    let mut gb = vec![0.0; nc];
                    let mut loss = 0.0;
                    for (x, &target) in chunk.iter().zip(tchunk) {
                        let p = model.probabilities_std(x);
                        loss -= p[target].max(f64::MIN_POSITIVE).ln();
                        for (c, &pc) in p.iter().enumerate() {
                            let err = pc - if c == target { 1.0 } else { 0.0 };
                            gb[c] += err;
                            for (d, &xd) in x.iter().enumerate() {
                                gw[d * nc + c] += err * xd;
                            }
                        }
                    }
                    (gw, gb, loss)
                })
                .collect();
            let mut gw = vec![0.0; dim * nc];
            let mut gb = vec![0.0; nc];
            let mut loss = 0.0;
            for (w, b, l) in parts {
                gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
                loss += l;
            }
            if !loss.is_finite() {
                return Err(AbpError::NonFinite("softmax training loss".into()));
            }
            model.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
            model.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
        }
        if model.weights.iter().chain(&model.bias).any(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite("softmax weights".into()));
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probabilities_std(&self, x: &[f64]) -> Vec<f64> {
        let nc = self.classes.len();
        let mut logits = self.bias.clone();
        for (d, &xd) in x.iter().enumerate() {
            for (l, &w) in logits.iter_mut().zip(&self.weights[d * nc..(d + 1) * nc]) {
                *l += xd * w;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            sum += *l;
        }
        logits.iter_mut().for_each(|l| *l /= sum);
        logits
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn predict(&self, test: &Matrix) -> Result<Vec<usize>> {
        if test.cols() != self.mean.len() {
            return Err(AbpError::shape("softmax test features", self.mean.len(), test.cols()));
        }
        Ok((0..test.rows())
            .into_par_iter()
            .map(|i| {
                let p = self.probabilities_std(&self.standardize(test.row(i)));
                let best = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc })
                    .0;
                self.classes[best]
            })
            .collect())
    }
}

pub fn softmax_classify(train: &Matrix, labels: &[usize], test: &Matrix, cfg: &SoftmaxConfig) -> Result<Vec<usize>> {
    SoftmaxClassifier::fit(train, labels, cfg)?.predict(test)
}

/// Average per-class top-1 accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassTop1 {
    pub mean: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Classes in the requested set with no test examples.
    pub excluded: Vec<usize>,
}

pub fn per_class_top1(pred: &[usize], truth: &[usize], classes: &[usize]) -> Result<PerClassTop1> {
    if pred.is_empty() {
        return Err(AbpError::Invalid("per_class_top1: no predictions".into()));
    }
    if pred.len() != truth.len() {
        return Err(AbpError::shape("per_class_top1 predictions", truth.len(), pred.len()));
    }
    if classes.is_empty() {
        return Err(AbpError::Invalid("per_class_top1: empty class set".into()));
    }
    let set: BTreeSet<usize> = classes.iter().copied().collect();
    let mut counts: BTreeMap<usize, (usize, usize)> = set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &t) in pred.iter().zip(truth) {
        let e = counts
            .get_mut(&t)
            .ok_or_else(|| AbpError::Invalid(format!("true label {t} is not in the class set")))?;
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (c, (hit, total)) in counts {
        if total == 0 {
            excluded.push(c);
        } else {
            per_class.insert(c, hit as f64 / total as f64);
        }
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(PerClassTop1 {
        mean,
        per_class,
        excluded,
    })
}

/// `2 a_s a_u / (a_s + a_u)`, or 0 when both are 0.
pub fn harmonic_mean(a_seen: f64, a_unseen: f64) -> f64 {
    let sum = a_seen + a_unseen;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * a_seen * a_unseen / sum
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub per_class: usize,
    pub k: usize,
    pub seed: u64,
    pub noise: bool,
    pub softmax: SoftmaxConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            per_class: 300,
            k: 20,
            seed: 0,
            noise: true,
            softmax: SoftmaxConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// Unweighted mean of `per_class_accuracy`.
    pub top1: f64,
    pub a_seen: Option<f64>,
    pub a_unseen: Option<f64>,
    pub h: Option<f64>,
    pub excluded_classes: Vec<usize>,
    /// Neighbour count actually used (ZSL only).
    pub k_used: Option<usize>,
    pub config: EvalConfig,
}

fn synth_unseen(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<SynthSet> {
    let mut rng = RngStreams::new(cfg.seed);
    let opts = SynthOptions {
        per_class: cfg.per_class,
        noise: cfg.noise,
        latent_std: 1.0,
    };
    synthesize(params, &dataset.attrs, &dataset.unseen_classes, &opts, &mut rng.synthesis)
}

fn check_model(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    let d = params.dims();
    if d.cond != dataset.attr_dim() || d.visual != dataset.visual_dim() {
        return Err(AbpError::shape(
            "dataset vs model",
            format!("K = {}, D = {}", d.cond, d.visual),
            format!("K = {}, D = {}", dataset.attr_dim(), dataset.visual_dim()),
        ));
    }
    Ok(())
}

/// Unseen-class test examples classified by KNN against synthesized
/// unseen-class features. `k` is capped at the number of synthesized rows.
pub fn eval_zsl(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    check_model(params, dataset)?;
    if dataset.test_unseen_idx.is_empty() {
        return Err(AbpError::Invalid("dataset has no unseen-class test examples".into()));
    }
    let synth = synth_unseen(params, dataset, cfg)?;
    let k = cfg.k.min(synth.features.rows());
    let test = dataset.visual.select_rows(&dataset.test_unseen_idx);
    let truth: Vec<usize> = dataset.test_unseen_idx.iter().map(|&i| dataset.labels[i]).collect();
    let pred = knn_classify(&synth.features, &synth.labels, &test, k)?;
    let acc = per_class_top1(&pred, &truth, &dataset.unseen_classes)?;
    Ok(EvalReport {
        mode: EvalMode::Zsl,
        top1: acc.mean,
        a_seen: None,
        a_unseen: Some(acc.mean),
        h: None,
        per_class_accuracy: acc.per_class,
        excluded_classes: acc.excluded,
        k_used: Some(k),
        config: *cfg,
    })
}

/// Softmax over real seen-class training features plus synthesized
/// unseen-class features, evaluated on both test splits.
pub fn eval_gzsl(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    check_model(params, dataset)?;
    if dataset.test_unseen_idx.is_empty() || dataset.test_seen_idx.is_empty() {
        return Err(AbpError::Invalid("GZSL needs both seen and unseen test examples".into()));
    }
    let synth = synth_unseen(params, dataset, cfg)?;
    let seen_train = dataset.visual.select_rows(&dataset.train_idx);
    let mut data = seen_train.into_vec();
    data.extend_from_slice(synth.features.as_slice());
    let mut labels: Vec<usize> = dataset.train_idx.iter().map(|&i| dataset.labels[i]).collect();
    labels.extend_from_slice(&synth.labels);
    let train = Matrix::from_vec(labels.len(), dataset.visual_dim(), data)?;
    let clf = SoftmaxClassifier::fit(&train, &labels, &cfg.softmax)?;

    let eval_split = |idx: &[usize], classes: &[usize]| -> Result<PerClassTop1> {
        let pred = clf.predict(&dataset.visual.select_rows(idx))?;
        let truth: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        per_class_top1(&pred, &truth, classes)
    };
    let seen = eval_split(&dataset.test_seen_idx, &dataset.seen_classes)?;
    let unseen = eval_split(&dataset.test_unseen_idx, &dataset.unseen_classes)?;
    let mut per_class = seen.per_class;
    per_class.extend(unseen.per_class);
    let mut excluded = seen.excluded;
    excluded.extend(unseen.excluded);
    let top1 = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        mode: EvalMode::Gzsl,
        per_class_accuracy: per_class,
        top1,
        a_seen: Some(seen.mean),
        a_unseen: Some(unseen.mean),
        h: Some(harmonic_mean(seen.mean, unseen.mean)),
        excluded_classes: excluded,
        k_used: None,
        config: *cfg,
    })
}

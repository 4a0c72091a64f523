//! Dataset and checkpoint persistence, and the synthetic teacher benchmark.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.json   shapes and layout
//! visual.f64      n x D little-endian f64, row-major
//! attrs.f64       num_classes x K little-endian f64, row-major
//! labels.csv      header `label`, then one class id per example
//! split.json      seen / unseen class ids and train / test index lists
//! mask.u8         optional n x D bytes, each 0 or 1
//! ```
//!
//! A checkpoint is a single file: magic `ABPT`, a `u32` version, then five
//! sections in fixed order (params, latents, adam, rng, config-json), each
//! prefixed by its `u64` byte length.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AbpError, Result};
use crate::generator::{Activation, Dims, ModelParams};
use crate::inference::LatentBank;
use crate::numerics::{Matrix, RngStreams};
use crate::trainer::{AdamState, TrainConfig, TrainState};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ABPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Visual features, one row per example.
    pub visual: Matrix,
    /// Class attributes, one row per class.
    pub attrs: Matrix,
    pub labels: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
    /// Visibility indicator, 1 = observed, 0 = missing.
    pub mask: Option<Matrix>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.visual.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attrs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.attrs.rows()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.labels.len() != n {
            return Err(AbpError::shape("dataset labels", n, self.labels.len()));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes()) {
            return Err(AbpError::Invalid(format!(
                "example {i} has label {l} but only {} classes exist",
                self.num_classes()
            )));
        }
        let seen: BTreeSet<usize> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.unseen_classes.iter().copied().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(AbpError::Invalid(format!("class {c} is both seen and unseen")));
        }
        if let Some(&c) = seen.union(&unseen).find(|&&c| c >= self.num_classes()) {
            return Err(AbpError::Invalid(format!("class id {c} has no attribute row")));
        }
        let mut used = vec![false; n];
        for (name, idx) in [
            ("train", &self.train_idx),
            ("test_seen", &self.test_seen_idx),
            ("test_unseen", &self.test_unseen_idx),
        ] {
            for &i in idx.iter() {
                if i >= n {
                    return Err(AbpError::Invalid(format!("{name} index {i} out of range (n = {n})")));
                }
                if used[i] {
                    return Err(AbpError::Invalid(format!("example {i} appears in more than one split ({name})")));
                }
                used[i] = true;
            }
        }
        for (name, idx, allowed) in [
            ("train", &self.train_idx, &seen),
            ("test_seen", &self.test_seen_idx, &seen),
            ("test_unseen", &self.test_unseen_idx, &unseen),
        ] {
            if let Some(&i) = idx.iter().find(|&&i| !allowed.contains(&self.labels[i])) {
                return Err(AbpError::Invalid(format!(
                    "{name} example {i} has label {} outside its class set",
                    self.labels[i]
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.shape() != self.visual.shape() {
                return Err(AbpError::shape(
                    "mask",
                    format!("{:?}", self.visual.shape()),
                    format!("{:?}", m.shape()),
                ));
            }
            if let Some(pos) = m.as_slice().iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(AbpError::Invalid(format!("mask entry {pos} is not 0 or 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    #[serde(rename = "D")]
    pub visual_dim: usize,
    #[serde(rename = "K")]
    pub attr_dim: usize,
    pub num_classes: usize,
    pub has_mask: bool,
    pub endianness: String,
    pub dtype: String,
    pub layout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AbpError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AbpError::io(path, e))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f64_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_file(path)?;
    if bytes.len() % 8 != 0 {
        return Err(AbpError::format(
            path,
            Some(bytes.len() as u64),
            "file length is not a multiple of 8 bytes",
        ));
    }
    let found = bytes.len() / 8;
    if found != rows * cols {
        let found_desc = if cols > 0 && found % cols == 0 {
            format!("{} rows of {cols}", found / cols)
        } else {
            format!("{found} values")
        };
        return Err(AbpError::FileShape {
            path: path.to_path_buf(),
            declared: format!("{rows} rows of {cols}"),
            found: found_desc,
        });
    }
    let mut data = Vec::with_capacity(found);
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(AbpError::format(path, Some(i as u64 * 8), "non-finite value"));
        }
        data.push(v);
    }
    Matrix::from_vec(rows, cols, data)
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AbpError::format(path, None, e.to_string()))
}

fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("plain data serializes");
    s.push(b'\n');
    s
}

fn check_split_indices(path: &Path, name: &str, idx: &[usize], n: usize) -> Result<()> {
    if let Some(&i) = idx.iter().find(|&&i| i >= n) {
        return Err(AbpError::format(path, None, format!("{name} index {i} out of range (n = {n})")));
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = parse_json(&manifest_path)?;
    if manifest.version != DATASET_VERSION {
        return Err(AbpError::format(
            &manifest_path,
            None,
            format!("unsupported version {} (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    if manifest.endianness != "little" || manifest.dtype != "f64" || manifest.layout != "row-major" {
        return Err(AbpError::format(
            &manifest_path,
            None,
            format!(
                "unsupported layout {}/{}/{} (expected little/f64/row-major)",
                manifest.endianness, manifest.dtype, manifest.layout
            ),
        ));
    }
    let n = manifest.n;
    let visual = read_f64_matrix(&dir.join("visual.f64"), n, manifest.visual_dim)?;
    let attrs = read_f64_matrix(&dir.join("attrs.f64"), manifest.num_classes, manifest.attr_dim)?;

    let labels_path = dir.join("labels.csv");
    let text = String::from_utf8(read_file(&labels_path)?)
        .map_err(|e| AbpError::format(&labels_path, Some(e.utf8_error().valid_up_to() as u64), "not UTF-8"))?;
    let mut labels = Vec::with_capacity(n);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let label: usize = line.parse().map_err(|_| {
            AbpError::format(&labels_path, None, format!("line {}: cannot parse label {line:?}", lineno + 1))
        })?;
        if label >= manifest.num_classes {
            return Err(AbpError::LabelOutOfRange {
                path: labels_path,
                line: lineno + 1,
                label,
                num_classes: manifest.num_classes,
            });
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(AbpError::FileShape {
            path: labels_path,
            declared: format!("{n} labels"),
            found: format!("{} labels", labels.len()),
        });
    }

    let split_path = dir.join("split.json");
    let split: Split = parse_json(&split_path)?;
    for (name, idx) in [
        ("train", &split.train),
        ("test_seen", &split.test_seen),
        ("test_unseen", &split.test_unseen),
    ] {
        check_split_indices(&split_path, name, idx, n)?;
    }

    let mask = if manifest.has_mask {
        let mask_path = dir.join("mask.u8");
        let bytes = read_file(&mask_path)?;
        if bytes.len() != n * manifest.visual_dim {
            return Err(AbpError::FileShape {
                path: mask_path,
                declared: format!("{} bytes ({n} x {})", n * manifest.visual_dim, manifest.visual_dim),
                found: format!("{} bytes", bytes.len()),
            });
        }
        if let Some(pos) = bytes.iter().position(|&b| b > 1) {
            return Err(AbpError::NonBinaryMask {
                path: mask_path,
                offset: pos as u64,
                value: bytes[pos],
            });
        }
        let data = bytes.iter().map(|&b| f64::from(b)).collect();
        Some(Matrix::from_vec(n, manifest.visual_dim, data)?)
    } else {
        None
    };

    let ds = Dataset {
        visual,
        attrs,
        labels,
        seen_classes: split.seen,
        unseen_classes: split.unseen,
        train_idx: split.train,
        test_seen_idx: split.test_seen,
        test_unseen_idx: split.test_unseen,
        mask,
    };
    ds.validate().map_err(|e| AbpError::format(&split_path, None, e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AbpError::io(dir, e))?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        n: ds.n(),
        visual_dim: ds.visual_dim(),
        attr_dim: ds.attr_dim(),
        num_classes: ds.num_classes(),
        has_mask: ds.mask.is_some(),
        endianness: "little".into(),
        dtype: "f64".into(),
        layout: "row-major".into(),
    };
    write_file(&dir.join("manifest.json"), &to_json_pretty(&manifest))?;
    write_file(&dir.join("visual.f64"), &f64_bytes(ds.visual.as_slice()))?;
    write_file(&dir.join("attrs.f64"), &f64_bytes(ds.attrs.as_slice()))?;
    let mut labels = String::from("label\n");
    for l in &ds.labels {
        labels.push_str(&l.to_string());
        labels.push('\n');
    }
    write_file(&dir.join("labels.csv"), labels.as_bytes())?;
    let split = Split {
        seen: ds.seen_classes.clone(),
        unseen: ds.unseen_classes.clone(),
        train: ds.train_idx.clone(),
        test_seen: ds.test_seen_idx.clone(),
        test_unseen: ds.test_unseen_idx.clone(),
    };
    write_file(&dir.join("split.json"), &to_json_pretty(&split))?;
    let mask_path = dir.join("mask.u8");
    match &ds.mask {
        Some(m) => {
            let bytes: Vec<u8> = m.as_slice().iter().map(|&v| v as u8).collect();
            write_file(&mask_path, &bytes)?;
        }
        None if mask_path.exists() => fs::remove_file(&mask_path).map_err(|e| AbpError::io(&mask_path, e))?,
        None => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    put_u64(buf, values.len() as u64);
    buf.extend_from_slice(&f64_bytes(values));
}

fn activation_code(a: Activation) -> (u32, f64) {
    match a {
        Activation::LeakyRelu { slope } => (0, slope),
        Activation::Relu => (1, 0.0),
        Activation::Identity => (2, 0.0),
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8], base: usize) -> Self {
        Reader { path, bytes, pos: 0, base }
    }

    fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AbpError::format(self.path, Some(self.offset()), format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.offset();
        usize::try_from(self.u64()?).map_err(|_| AbpError::format(self.path, Some(at), "length overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let at = self.offset();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| AbpError::format(self.path, Some(at), "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn activation(&mut self) -> Result<Activation> {
        let at = self.offset();
        let code = self.u32()?;
        let slope = self.f64()?;
        match code {
            0 => Ok(Activation::LeakyRelu { slope }),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            other => Err(AbpError::format(self.path, Some(at), format!("unknown activation code {other}"))),
        }
    }

    fn section(&mut self) -> Result<Reader<'a>> {
        let len = self.usize()?;
        let base = self.base + self.pos;
        let body = self.take(len)?;
        Ok(Reader::new(self.path, body, base))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(AbpError::format(self.path, Some(self.offset()), "trailing bytes"));
        }
        Ok(())
    }
}

fn encode_params(p: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    let d = p.dims();
    for v in [d.cond, d.latent, d.hidden, d.visual] {
        put_u64(&mut buf, v as u64);
    }
    for a in [p.hidden_act(), p.output_act()] {
        let (code, slope) = activation_code(a);
        put_u32(&mut buf, code);
        buf.extend_from_slice(&slope.to_le_bytes());
    }
    buf.extend_from_slice(&p.sigma().to_le_bytes());
    put_f64s(&mut buf, p.theta());
    buf
}

fn decode_params(r: &mut Reader) -> Result<ModelParams> {
    let at = r.offset();
    let dims = Dims::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let hidden_act = r.activation()?;
    let output_act = r.activation()?;
    let sigma = r.f64()?;
    let theta = r.f64s()?;
    r.finish()?;
    ModelParams::new(dims, hidden_act, output_act, sigma, theta)
        .map_err(|e| AbpError::format(r.path, Some(at), format!("params section: {e}")))
}

/// Serialized checkpoint config section.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    train_config: TrainConfig,
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);

    let mut sections: Vec<Vec<u8>> = Vec::with_capacity(5);
    sections.push(encode_params(&state.params));

    let mut latents = Vec::new();
    let z = state.bank.as_matrix();
    put_u64(&mut latents, z.rows() as u64);
    put_u64(&mut latents, z.cols() as u64);
    put_f64s(&mut latents, z.as_slice());
    sections.push(latents);

    let mut adam = Vec::new();
    put_u64(&mut adam, state.adam.t);
    put_f64s(&mut adam, &state.adam.m);
    put_f64s(&mut adam, &state.adam.v);
    sections.push(adam);

    sections.push(serde_json::to_vec(&state.rng).expect("rng state serializes"));
    let meta = CheckpointMeta {
        epoch: state.epoch,
        train_config: state.config.clone(),
    };
    sections.push(serde_json::to_vec(&meta).expect("config serializes"));

    for s in sections {
        put_u64(&mut out, s.len() as u64);
        out.extend_from_slice(&s);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader::new(path, bytes, 0);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(AbpError::format(path, Some(0), "bad magic (expected ABPT)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AbpError::format(path, Some(4), format!("unsupported checkpoint version {version}")));
    }

    let params = decode_params(&mut r.section()?)?;

    let mut s = r.section()?;
    let at = s.offset();
    let (rows, cols) = (s.usize()?, s.usize()?);
    let z = s.f64s()?;
    s.finish()?;
    let bank = LatentBank::from_matrix(
        Matrix::from_vec(rows, cols, z).map_err(|e| AbpError::format(path, Some(at), format!("latents section: {e}")))?,
    );

    let mut s = r.section()?;
    let t = s.u64()?;
    let m = s.f64s()?;
    let v = s.f64s()?;
    s.finish()?;
    if m.len() != params.theta().len() || v.len() != params.theta().len() {
        return Err(AbpError::format(path, Some(s.offset()), "adam moments do not match parameter count"));
    }
    let adam = AdamState { m, v, t };

    let s = r.section()?;
    let rng: RngStreams =
        serde_json::from_slice(s.bytes).map_err(|e| AbpError::format(path, Some(s.base as u64), format!("rng section: {e}")))?;

    let s = r.section()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(s.bytes).map_err(|e| AbpError::format(path, Some(s.base as u64), format!("config section: {e}")))?;
    r.finish()?;

    Ok(TrainState {
        params,
        bank,
        adam,
        rng,
        epoch: meta.epoch,
        config: meta.train_config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // write-then-rename so an interrupted save never clobbers the previous checkpoint
    let tmp: PathBuf = path.with_extension("tmp");
    write_file(&tmp, &encode_checkpoint(state))?;
    fs::rename(&tmp, path).map_err(|e| AbpError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// synthetic teacher benchmark

/// Parameters of the synthetic teacher-student benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub teacher_hidden: usize,
    /// Multiplies the teacher's first-layer weights on the attributes, which
    /// sets how far apart the class means are relative to the latent spread.
    pub teacher_attr_gain: f64,
    pub sigma: f64,
    pub missing_ratio: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_seen: 20,
            num_unseen: 5,
            per_class_train: 50,
            per_class_test: 100,
            attr_dim: 16,
            latent_dim: 10,
            visual_dim: 64,
            teacher_hidden: 64,
            teacher_attr_gain: 3.5,
            sigma: 0.3,
            missing_ratio: 0.0,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_seen < 2 || self.num_unseen < 2 {
            return Err(AbpError::Config("need at least 2 seen and 2 unseen classes".into()));
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return Err(AbpError::Config("per-class example counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.missing_ratio) {
            return Err(AbpError::Config(format!("missing ratio must be in [0, 1), got {}", self.missing_ratio)));
        }
        if !(self.teacher_attr_gain >= 0.0 && self.teacher_attr_gain.is_finite()) {
            return Err(AbpError::Config(format!(
                "teacher attribute gain must be >= 0, got {}",
                self.teacher_attr_gain
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(AbpError::Config(format!("teacher noise must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// The generator that produced a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub spec: SynthSpec,
    pub teacher: ModelParams,
}

/// Draws a synthetic dataset from a random teacher generator.
///
/// Classes `0..num_seen` are seen and the rest unseen. Examples are laid out
/// class by class: seen-train, then seen-test, then unseen-test. With a
/// positive missing ratio the mask drops entries i.i.d. over the whole
/// matrix, and the dropped entries of training rows are zeroed in the stored
/// features; test rows keep their complete features.
pub fn gen_synth(spec: &SynthSpec) -> Result<(Dataset, TeacherRecord)> {
    spec.validate()?;
    let mut streams = RngStreams::new(spec.seed);
    let num_classes = spec.num_seen + spec.num_unseen;
    let dims = Dims::new(spec.attr_dim, spec.latent_dim, spec.teacher_hidden, spec.visual_dim);
    let mut teacher = ModelParams::init(&mut streams.init, dims, Activation::Relu, spec.sigma)?;
    let attr_weights = spec.attr_dim * dims.hidden;
    teacher.update_theta(|t| t[..attr_weights].iter_mut().for_each(|w| *w *= spec.teacher_attr_gain))?;

    let attr_data: Vec<f64> = (0..num_classes * spec.attr_dim).map(|_| streams.init.uniform()).collect();
    let attrs = Matrix::from_vec(num_classes, spec.attr_dim, attr_data)?;

    let mut labels = Vec::new();
    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    for class in 0..spec.num_seen {
        for _ in 0..spec.per_class_train {
            train_idx.push(labels.len());
            labels.push(class);
        }
    }
    for class in 0..spec.num_seen {
        for _ in 0..spec.per_class_test {
            test_seen_idx.push(labels.len());
            labels.push(class);
        }
    }
    for class in spec.num_seen..num_classes {
        for _ in 0..spec.per_class_test {
            test_unseen_idx.push(labels.len());
            labels.push(class);
        }
    }

    let rng = &mut streams.synthesis;
    let n = labels.len();
    let mut visual = Vec::with_capacity(n * spec.visual_dim);
    let mut z = vec![0.0; spec.latent_dim];
    for &label in &labels {
        rng.fill_gaussian(&mut z, 0.0, 1.0);
        let (x, _) = teacher.forward(attrs.row(label), &z)?;
        for v in x {
            visual.push(v + spec.sigma * rng.standard_normal());
        }
    }

    let mask = if spec.missing_ratio > 0.0 {
        let rng = &mut streams.shuffle;
        let m: Vec<f64> = (0..n * spec.visual_dim)
            .map(|_| if rng.uniform() < spec.missing_ratio { 0.0 } else { 1.0 })
            .collect();
        for &i in &train_idx {
            let row = i * spec.visual_dim..(i + 1) * spec.visual_dim;
            for (v, &keep) in visual[row.clone()].iter_mut().zip(&m[row]) {
                *v *= keep;
            }
        }
        Some(Matrix::from_vec(n, spec.visual_dim, m)?)
    } else {
        None
    };

    let ds = Dataset {
        visual: Matrix::from_vec(n, spec.visual_dim, visual)?,
        attrs,
        labels,
        seen_classes: (0..spec.num_seen).collect(),
        unseen_classes: (spec.num_seen..num_classes).collect(),
        train_idx,
        test_seen_idx,
        test_unseen_idx,
        mask,
    };
    ds.validate()?;
    Ok((
        ds,
        TeacherRecord {
            spec: spec.clone(),
            teacher,
        },
    ))
}

/// Builds a dataset from plain-text exports of a released benchmark.
///
/// `features_csv` has one example per row, `labels_csv` one class id per line
/// (an optional non-numeric header is skipped), `attrs_csv` one class per row,
/// and `split_json` follows the [`Split`] schema.
pub fn import_csv(features_csv: &Path, labels_csv: &Path, attrs_csv: &Path, split_json: &Path) -> Result<Dataset> {
    fn read_table(path: &Path) -> Result<Matrix> {
        let text = String::from_utf8(read_file(path)?).map_err(|_| AbpError::format(path, None, "not UTF-8"))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split([',', ' ', '\t']).filter(|s| !s.is_empty()).map(str::parse).collect();
            match row {
                Ok(r) => rows.push(r),
                Err(_) if lineno == 0 => continue,
                Err(_) => return Err(AbpError::format(path, None, format!("line {}: not numeric", lineno + 1))),
            }
        }
        Matrix::from_rows(&rows).map_err(|e| AbpError::format(path, None, e.to_string()))
    }
    let visual = read_table(features_csv)?;
    let attrs = read_table(attrs_csv)?;
    let labels_text = String::from_utf8(read_file(labels_csv)?).map_err(|_| AbpError::format(labels_csv, None, "not UTF-8"))?;
    let mut labels = Vec::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<usize>() {
            Ok(l) if l < attrs.rows() => labels.push(l),
            Ok(l) => {
                return Err(AbpError::LabelOutOfRange {
                    path: labels_csv.to_path_buf(),
                    line: lineno + 1,
                    label: l,
                    num_classes: attrs.rows(),
                })
            }
            Err(_) if lineno == 0 => continue,
            Err(_) => return Err(AbpError::format(labels_csv, None, format!("line {}: not a class id", lineno + 1))),
        }
    }
    let split: Split = parse_json(split_json)?;
    let ds = Dataset {
        visual,
        attrs,
        labels,
        seen_classes: split.seen,
        unseen_classes: split.unseen,
        train_idx: split.train,
        test_seen_idx: split.test_seen,
        test_unseen_idx: split.test_unseen,
        mask: None,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_seen: 3,
            num_unseen: 2,
            per_class_train: 4,
            per_class_test: 3,
            attr_dim: 3,
            latent_dim: 2,
            visual_dim: 5,
            teacher_hidden: 6,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let (ds, _) = gen_synth(&SynthSpec {
            missing_ratio: 0.3,
            ..small_spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_visual_names_both_counts() {
        let (ds, _) = gen_synth(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("visual.f64");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5 * 8]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, AbpError::FileShape { .. }));
        assert!(msg.contains(&format!("{} rows", ds.n())) && msg.contains(&format!("{} rows", ds.n() - 1)), "{msg}");
    }

    #[test]
    fn non_binary_mask_reports_offset() {
        let (ds, _) = gen_synth(&SynthSpec {
            missing_ratio: 0.5,
            ..small_spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("mask.u8");
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] = 2;
        fs::write(&path, bytes).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            AbpError::NonBinaryMask { offset, value, .. } => assert_eq!((offset, value), (7, 2)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_out_of_range_reports_line() {
        let (ds, _) = gen_synth(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("labels.csv");
        let text = fs::read_to_string(&path).unwrap().replacen("\n0\n", "\n99\n", 1);
        fs::write(&path, text).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            AbpError::LabelOutOfRange { line, label, .. } => assert_eq!((line, label), (2, 99)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("manifest.json"));
    }

    #[test]
    fn foreign_layout_rejected() {
        let (ds, _) = gen_synth(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"little\"", "\"big\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), AbpError::Format { .. }));
    }

    #[test]
    fn synth_without_missing_has_no_mask() {
        let (ds, _) = gen_synth(&small_spec()).unwrap();
        assert!(ds.mask.is_none());
    }

    #[test]
    fn synth_is_reproducible_and_split_is_clean() {
        let (a, ta) = gen_synth(&small_spec()).unwrap();
        let (b, tb) = gen_synth(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.train_idx.iter().all(|&i| a.seen_classes.contains(&a.labels[i])));
        assert!(a.test_unseen_idx.iter().all(|&i| a.unseen_classes.contains(&a.labels[i])));
    }

    #[test]
    fn synth_missing_ratio_concentrates() {
        let spec = SynthSpec {
            num_seen: 2,
            num_unseen: 2,
            per_class_train: 2500,
            per_class_test: 2500,
            attr_dim: 2,
            latent_dim: 1,
            visual_dim: 100,
            teacher_hidden: 2,
            missing_ratio: 0.9,
            ..Default::default()
        };
        let (ds, _) = gen_synth(&spec).unwrap();
        let m = ds.mask.unwrap();
        assert!(m.as_slice().len() >= 1_000_000);
        let zeros = m.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / m.as_slice().len() as f64;
        assert!((0.899..=0.901).contains(&zeros), "zero fraction {zeros}");
    }

    #[test]
    fn invalid_synth_specs_rejected() {
        assert!(gen_synth(&SynthSpec { num_unseen: 1, ..small_spec() }).is_err());
        assert!(gen_synth(&SynthSpec { missing_ratio: 1.0, ..small_spec() }).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let (mut ds, _) = gen_synth(&small_spec()).unwrap();
        ds.test_seen_idx.push(ds.train_idx[0]);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn import_csv_reads_plain_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        fs::write(p("x.csv"), "f0,f1\n1.0,2.0\n3.0,4.0\n5.0,6.0\n").unwrap();
        fs::write(p("y.csv"), "0\n1\n2\n").unwrap();
        fs::write(p("c.csv"), "0.1 0.2\n0.3 0.4\n0.5 0.6\n").unwrap();
        fs::write(
            p("s.json"),
            r#"{"seen":[0,1],"unseen":[2],"train":[0],"test_seen":[1],"test_unseen":[2]}"#,
        )
        .unwrap();
        let ds = import_csv(&p("x.csv"), &p("y.csv"), &p("c.csv"), &p("s.json")).unwrap();
        assert_eq!(ds.visual.shape(), (3, 2));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert_eq!(ds.attrs.get(2, 1), 0.6);
    }
}

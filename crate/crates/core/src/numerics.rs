//! Dense matrices and seeded random streams.
//!
//! Every matrix holds finite `f64` values only; constructors reject NaN and
//! infinities so that a bad value fails at the point it enters rather than
//! somewhere downstream. Randomness comes from PCG-64 (`Lcg128Xsl64`), one
//! generator per named stream, with Gaussian draws produced by Box–Muller.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{AbpError, Result};

/// Row-major dense matrix of finite `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AbpError::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(AbpError::shape(format!("Matrix::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Sets one entry. Non-finite values are rejected.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(AbpError::NonFinite(format!("Matrix::set({i}, {j})")));
        }
        self.data[i * self.cols + j] = value;
        Ok(())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Replaces row `i`. Non-finite values are rejected.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.cols {
            return Err(AbpError::shape("Matrix::set_row", self.cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AbpError::NonFinite(format!("Matrix::set_row({i})")));
        }
        self.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(values);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a matrix with zero columns still has `rows` empty rows
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Selects the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(AbpError::shape(
                "matmul",
                format!("lhs {}x{} to be followed by {}xN", self.rows, self.cols, self.cols),
                format!("rhs {}x{}", other.rows, other.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(self.rows, other.cols, out)
    }
}

/// One independent PCG-64 stream with a cached Box–Muller spare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStream {
    pcg: Pcg64,
    spare: Option<f64>,
}

impl RngStream {
    /// `stream` selects the PCG increment, so equal seeds with different
    /// stream ids give non-overlapping sequences.
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream {
            pcg: Pcg64::new(seed as u128, stream as u128),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.pcg.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.pcg.random::<f64>()
    }

    /// Uniform integer on [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.pcg.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for v in out {
            *v = mean + std * self.standard_normal();
        }
    }

    /// Splits off a child stream. The parent advances by one draw.
    pub fn fork(&mut self, stream: u64) -> RngStream {
        RngStream::new(self.next_u64(), stream)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.pcg);
    }
}

/// `n` i.i.d. draws from N(mean, std²).
pub fn gaussian(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    rng.fill_gaussian(&mut out, mean, std);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    Langevin,
    Synthesis,
    Shuffle,
}

impl StreamId {
    fn tag(self) -> u64 {
        match self {
            StreamId::Init => 1,
            StreamId::Langevin => 2,
            StreamId::Synthesis => 3,
            StreamId::Shuffle => 4,
        }
    }
}

/// The four named streams used by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub seed: u64,
    pub init: RngStream,
    pub langevin: RngStream,
    pub synthesis: RngStream,
    pub shuffle: RngStream,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            seed,
            init: RngStream::new(seed, StreamId::Init.tag()),
            langevin: RngStream::new(seed, StreamId::Langevin.tag()),
            synthesis: RngStream::new(seed, StreamId::Synthesis.tag()),
            shuffle: RngStream::new(seed, StreamId::Shuffle.tag()),
        }
    }

    pub fn get_mut(&mut self, id: StreamId) -> &mut RngStream {
        match id {
            StreamId::Init => &mut self.init,
            StreamId::Langevin => &mut self.langevin,
            StreamId::Synthesis => &mut self.synthesis,
            StreamId::Shuffle => &mut self.shuffle,
        }
    }
}

#[inline]
pub(crate) fn squared_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

//! Seeded SplitMix64 generator and the small dense linear-algebra kernels the
//! rest of the crate is built on.
//!
//! Everything here is a pure function over values. Matrices are row-major
//! `f64` and are small (at most a few hundred rows), so the kernels are plain
//! loops.

use std::fmt;

use thiserror::Error;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Rows whose Gram-Schmidt residual falls below `DEGENERATE_TOL * sqrt(n)` are
/// treated as linearly dependent on the rows before them.
pub const DEGENERATE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains a non-finite entry at index {0}")]
    NonFinite(usize),
    /// Row `row` is (numerically) in the span of the previous rows.
    #[error("degenerate matrix: row {row} residual norm {residual:e} below threshold")]
    Degenerate { row: usize, residual: f64 },
}

/// SplitMix64 state. Advancing is bit-exact on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub state: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Value-style step: returns the advanced state and the output.
    pub fn step(self) -> (Self, u64) {
        let state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        (Self { state }, z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        let (next, out) = self.step();
        *self = next;
        out
    }

    /// Uniform on `[-1, 1)`.
    pub fn uniform(&mut self) -> f64 {
        bits_to_symmetric_unit(self.next_u64())
    }

    /// Uniform on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound`. `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() needs a nonzero bound");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `(bits >> 11) * 2^-53 * 2 - 1`.
pub fn bits_to_symmetric_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

pub fn rng_next(state: RngState) -> (RngState, u64) {
    state.step()
}

pub fn rng_uniform(state: RngState) -> (RngState, f64) {
    let (next, bits) = state.step();
    (next, bits_to_symmetric_unit(bits))
}

/// Dense row-major matrix of finite `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Fills a `rows x cols` matrix row-major from `rng_uniform` draws.
    pub fn random_uniform(rows: usize, cols: usize, rng: &mut RngState) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        matmul(self, rhs)
    }

    /// Row vector times matrix: `v * self`.
    pub fn left_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "vector of length {} times {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &vk) in v.iter().enumerate() {
            let row = self.row(k);
            for (o, &m) in out.iter_mut().zip(row) {
                *o += vk * m;
            }
        }
        Ok(out)
    }

    pub fn frobenius_distance(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Subtracts from `v` its components along each finished row, one row at a
/// time (the modified variant).
fn project_out(v: &mut [f64], finished: &[f64], n: usize) {
    for qj in finished.chunks_exact(n) {
        let proj = dot(v, qj);
        for (x, &y) in v.iter_mut().zip(qj) {
            *x -= proj * y;
        }
    }
}

/// Row-wise modified Gram-Schmidt with one reorthogonalization sweep. Rows
/// are processed in order; a row whose residual after the first sweep is
/// below `DEGENERATE_TOL * sqrt(n)` fails with [`LinalgError::Degenerate`].
pub fn modified_gram_schmidt(r: &Matrix) -> Result<Matrix, LinalgError> {
    if !r.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "Gram-Schmidt needs a square matrix, got {}x{}",
            r.rows, r.cols
        )));
    }
    let n = r.rows;
    let threshold = DEGENERATE_TOL * (n as f64).sqrt();
    let mut q = r.data.clone();
    for i in 0..n {
        let (done, rest) = q.split_at_mut(i * n);
        let v = &mut rest[..n];
        project_out(v, done, n);
        let residual = dot(v, v).sqrt();
        if residual < threshold {
            return Err(LinalgError::Degenerate { row: i, residual });
        }
        // Second sweep: one pass leaves a defect around 2e-10 at n = 192.
        project_out(v, done, n);
        let norm = dot(v, v).sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    Ok(Matrix { rows: n, cols: n, data: q })
}

/// `max |Q Q^T - I|` over all entries.
pub fn orthogonality_defect(q: &Matrix) -> f64 {
    assert!(q.is_square(), "orthogonality_defect needs a square matrix");
    let n = q.rows;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let g = dot(q.row(i), q.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

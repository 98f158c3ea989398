//! Dense numeric kernels, the Adam optimizer, the seeded generator and a
//! central-difference gradient oracle.
//!
//! Everything is single precision. Products accumulate in a fixed order
//! (row-major, ascending inner index) so results are reproducible bit for bit.

use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Wraps `data` as a `rows × cols` matrix. Rejects a wrong length or any
    /// NaN/infinite entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * std)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order: each out[i][j] still accumulates in ascending k.
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "t_matmul",
                format!(
                    "({}x{})ᵀ · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_t",
                format!(
                    "{}x{} · ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.fill(value);
    }

    /// Sum over rows, as a `1 × cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Matrix {
        let mut out = self.column_sums();
        if self.rows > 0 {
            out.scale(1.0 / self.rows as f32);
        }
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn norm(&self) -> f32 {
        self.squared_norm().sqrt() as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{}x{} -> {rows}x{cols}", self.rows, self.cols),
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f32;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f32 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f32 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Ascending-order dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for a list of tensors plus the shared step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Matrix::len).collect();
        AdamState {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, tensor: usize) -> &[f32] {
        &self.first[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f32] {
        &self.second[tensor]
    }
}

/// One bias-corrected Adam update over every tensor in `params`.
///
/// Nothing is modified when an argument is rejected: shape disagreements,
/// out-of-range hyperparameters and non-finite gradients all leave both the
/// parameters and `state` untouched.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
        return Err(Error::Domain(format!(
            "Adam requires 0 <= beta < 1 and eps > 0, got {cfg:?}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim(
                "adam_step",
                format!("parameter of {} entries, gradient of {}", p.len(), g.len()),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam_step"));
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let first = &mut state.first[i];
        let second = &mut state.second[i];
        for (((w, &g), m), v) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(first.iter_mut())
            .zip(second.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Seeded generator: ChaCha8 from `rand_chacha` 0.9, seeded through
/// `SeedableRng::seed_from_u64`. Independent sub-streams come from
/// [`Rng::fork`], which keeps the key and selects a different ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed_value(&self) -> u64 {
        self.seed
    }

    /// A fresh generator on ChaCha stream `stream` of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            inner,
            seed: self.seed,
        }
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        // 24 random mantissa bits.
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Central-difference gradient of a scalar function at `x`.
///
/// Each entry is perturbed by `±h` in `f32` and the quotient uses the actual
/// representable step, `(f(x⁺) − f(x⁻)) / (x⁺ − x⁻)`. Meant for tests.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f32,
) -> Result<Matrix> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        let plus = orig + h;
        let minus = orig - h;
        probe.as_mut_slice()[i] = plus;
        let f_plus = f(&probe);
        probe.as_mut_slice()[i] = minus;
        let f_minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at entry {i} (f+ = {f_plus}, f- = {f_minus})"
            )));
        }
        let g = (f_plus - f_minus) / (plus as f64 - minus as f64);
        grad.as_mut_slice()[i] = g as f32;
    }
    Ok(grad)
}

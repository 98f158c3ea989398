//! Linear baselines.
//!
//! NLinear subtracts the window's last row, applies one affine map and adds
//! the last value of the first feature back. DLinear splits the window into
//! a moving-average trend and a remainder and maps each with its own weights.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::Gradients;

#[derive(Clone, Debug, PartialEq)]
pub struct NLinear {
    /// `N × D_in`.
    pub w: Matrix,
    pub b: Matrix,
}

impl NLinear {
    /// Zero weights: the initial prediction is the last reading.
    pub fn init(window: usize, input_dim: usize) -> Self {
        NLinear {
            w: Matrix::zeros(window, input_dim),
            b: Matrix::zeros(1, 1),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<f32> {
        nlinear_forward(x, self)
    }

    pub(crate) fn backward(&self, x: &Matrix, g: f32) -> Result<Gradients> {
        let n = x.rows();
        let last = x.row(n - 1).to_vec();
        let dw = Matrix::from_fn(x.rows(), x.cols(), |t, f| g * (x[(t, f)] - last[f]));
        Ok(Gradients::new(vec![("nlinear.w", dw), ("nlinear.b", Matrix::filled(1, 1, g))]))
    }

    pub(crate) fn trainable(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("nlinear.w", &self.w), ("nlinear.b", &self.b)]
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// `x[N−1, 0] + Σ_{t,f} w[t,f]·(x[t,f] − x[N−1,f]) + b`.
pub fn nlinear_forward(x: &Matrix, params: &NLinear) -> Result<f32> {
    if x.shape() != params.w.shape() || x.rows() == 0 {
        return Err(Error::dim("nlinear_forward", "window shape differs from weights"));
    }
    let n = x.rows();
    let last = x.row(n - 1);
    let mut acc = 0.0f32;
    for t in 0..n {
        for (f, (&xv, &w)) in x.row(t).iter().zip(params.w.row(t)).enumerate() {
            acc += w * (xv - last[f]);
        }
    }
    Ok(last[0] + acc + params.b[(0, 0)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DLinear {
    pub w_trend: Matrix,
    pub w_season: Matrix,
    pub b: Matrix,
    pub kernel: usize,
}

impl DLinear {
    /// Both maps start as the window mean of the first feature, so the
    /// initial prediction is that mean.
    pub fn init(window: usize, input_dim: usize, kernel: usize) -> Self {
        let w = Matrix::from_fn(window, input_dim, |_, f| if f == 0 { 1.0 / window as f32 } else { 0.0 });
        DLinear {
            w_trend: w.clone(),
            w_season: w,
            b: Matrix::zeros(1, 1),
            kernel: kernel.clamp(1, window),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<f32> {
        dlinear_forward(x, self)
    }

    pub(crate) fn backward(&self, x: &Matrix, g: f32) -> Result<Gradients> {
        let trend = moving_average(x, self.kernel)?;
        let mut dt = trend.clone();
        dt.scale(g);
        let mut ds = Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] - trend[(r, c)]);
        ds.scale(g);
        Ok(Gradients::new(vec![
            ("dlinear.trend", dt),
            ("dlinear.season", ds),
            ("dlinear.b", Matrix::filled(1, 1, g)),
        ]))
    }

    pub(crate) fn trainable(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("dlinear.trend", &self.w_trend),
            ("dlinear.season", &self.w_season),
            ("dlinear.b", &self.b),
        ]
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_trend, &mut self.w_season, &mut self.b]
    }
}

/// Per-column moving average with `kernel` taps; the ends are padded by
/// repeating the first row `(kernel − 1)/2` times and the last row for the
/// remaining `kernel − 1 − (kernel − 1)/2`.
pub fn moving_average(x: &Matrix, kernel: usize) -> Result<Matrix> {
    if kernel == 0 {
        return Err(Error::Domain("moving-average kernel must be positive".into()));
    }
    let n = x.rows();
    let front = (kernel - 1) / 2;
    let at = |i: isize, c: usize| -> f32 {
        let r = i.clamp(0, n as isize - 1) as usize;
        x[(r, c)]
    };
    Ok(Matrix::from_fn(n, x.cols(), |t, c| {
        let start = t as isize - front as isize;
        let mut acc = 0.0f32;
        for k in 0..kernel as isize {
            acc += at(start + k, c);
        }
        acc / kernel as f32
    }))
}

/// `Σ w_trend ⊙ trend + Σ w_season ⊙ (x − trend) + b`.
pub fn dlinear_forward(x: &Matrix, params: &DLinear) -> Result<f32> {
    if x.shape() != params.w_trend.shape() || x.shape() != params.w_season.shape() {
        return Err(Error::dim("dlinear_forward", "window shape differs from weights"));
    }
    let trend = moving_average(x, params.kernel)?;
    let mut acc = 0.0f32;
    for i in 0..x.len() {
        let tr = trend.as_slice()[i];
        acc += params.w_trend.as_slice()[i] * tr + params.w_season.as_slice()[i] * (x.as_slice()[i] - tr);
    }
    Ok(acc + params.b[(0, 0)])
}

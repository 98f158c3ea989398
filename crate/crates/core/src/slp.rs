//! Sequence lens projector.
//!
//! Compresses an `N × D` sequence into `L = ⌈log₂ N⌉` lens rows with one
//! learned weight matrix and a per-lens bias: `Z = Wᵀ X + B`. Every lens is a
//! weighted view of the whole sequence, not of a disjoint bin.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// `⌈log₂ n⌉`, defined for `n ≥ 2`.
pub fn num_lenses(n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::Domain(format!("lens count needs a window of at least 2, got {n}")));
    }
    Ok((usize::BITS - (n - 1).leading_zeros()) as usize)
}

/// Compression weights `W` (`N × L`) and lens bias `B` (`L × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct SlpParams {
    pub w: Matrix,
    pub b: Matrix,
}

/// Gradients of [`slp_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlpGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

impl SlpParams {
    /// Column `ℓ` of `W` starts as a normalized Gaussian bump over dyadic
    /// segment `ℓ` (see [`lens_segments`]) plus `N(0, noise_std²)` jitter; `B`
    /// starts at zero.
    pub fn init(n: usize, d: usize, noise_std: f32, rng: &mut Rng) -> Result<Self> {
        let lenses = num_lenses(n)?;
        let mut w = Matrix::zeros(n, lenses);
        for (l, seg) in lens_segments(n)?.into_iter().enumerate() {
            let center = 0.5 * (seg.start + seg.end - 1) as f32;
            let width = 0.5 * seg.len() as f32 + 0.5;
            let mut total = 0.0f32;
            for t in 0..n {
                let z = (t as f32 - center) / width;
                let v = (-0.5 * z * z).exp();
                w[(t, l)] = v;
                total += v;
            }
            for t in 0..n {
                w[(t, l)] /= total;
            }
        }
        for v in w.as_mut_slice() {
            *v += noise_std * rng.normal();
        }
        Ok(SlpParams {
            w,
            b: Matrix::zeros(lenses, d),
        })
    }

    pub fn window(&self) -> usize {
        self.w.rows()
    }

    pub fn lenses(&self) -> usize {
        self.w.cols()
    }

    fn check(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.rows() != self.w.rows() || x.cols() != self.b.cols() || self.w.cols() != self.b.rows() {
            return Err(Error::dim(
                op,
                format!(
                    "input {}x{}, W {}x{}, B {}x{}",
                    x.rows(),
                    x.cols(),
                    self.w.rows(),
                    self.w.cols(),
                    self.b.rows(),
                    self.b.cols()
                ),
            ));
        }
        Ok(())
    }
}

/// Dyadic partition of time indices `0..n`, measured back from the newest
/// step: segment `ℓ` covers ages `[2^ℓ − 1, 2^{ℓ+1} − 1)` and the last segment
/// runs to the oldest step. Returned as ranges of time indices.
pub fn lens_segments(n: usize) -> Result<Vec<Range<usize>>> {
    let lenses = num_lenses(n)?;
    let mut out = Vec::with_capacity(lenses);
    for l in 0..lenses {
        let age_lo = (1usize << l) - 1;
        let age_hi = if l + 1 == lenses { n } else { (1usize << (l + 1)) - 1 };
        out.push(n - age_hi..n - age_lo);
    }
    Ok(out)
}

/// `Z = Wᵀ X + B`.
pub fn slp_forward(x: &Matrix, params: &SlpParams) -> Result<Matrix> {
    params.check("slp_forward", x)?;
    let mut z = params.w.t_matmul(x)?;
    z.add_assign(&params.b)?;
    Ok(z)
}

/// `dX = W dZ`, `dW = X dZᵀ`, `dB = dZ`.
pub fn slp_backward(dz: &Matrix, x: &Matrix, params: &SlpParams) -> Result<SlpGrads> {
    params.check("slp_backward", x)?;
    if dz.shape() != params.b.shape() {
        return Err(Error::dim("slp_backward", "upstream gradient shape differs from Z"));
    }
    Ok(SlpGrads {
        dx: params.w.matmul(dz)?,
        dw: x.matmul_t(dz)?,
        db: dz.clone(),
    })
}

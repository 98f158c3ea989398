//! Softmax multi-head attention, kept for the ablation ladder. Heads split
//! the `D` columns evenly; head outputs are concatenated with no output
//! projection.

use crate::eba::{project_qkv, QkvProjections};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct MhaCache {
    z: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-softmax weights, one `T × T` matrix per head.
    probs: Vec<Matrix>,
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("mha", format!("{heads} heads do not split {d} columns")));
    }
    Ok(d / heads)
}

pub fn mha_forward(z: &Matrix, proj: &QkvProjections, heads: usize, keep_cache: bool) -> Result<(Matrix, Option<MhaCache>)> {
    let (q, k, v) = project_qkv(z, proj)?;
    let t = z.rows();
    let d = v.cols();
    let dh = check_heads(d, heads)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            let mut max = f32::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s = crate::numerics::dot(qi, &k.row(j)[cols.clone()]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        for i in 0..t {
            for j in 0..t {
                let w = p[(i, j)];
                let vj = &v.row(j)[cols.clone()];
                for (o, &x) in out.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        probs.push(p);
    }
    let cache = keep_cache.then(|| MhaCache {
        z: z.clone(),
        q,
        k,
        v,
        probs,
    });
    Ok((out, cache))
}

/// Returns `(dW_Q, dW_K, dW_V, dZ)`.
pub fn mha_backward(
    d_out: &Matrix,
    cache: &MhaCache,
    proj: &QkvProjections,
    heads: usize,
) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let (t, d) = cache.v.shape();
    if d_out.shape() != (t, d) {
        return Err(Error::dim("mha_backward", "upstream gradient shape"));
    }
    let dh = check_heads(d, heads)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        for i in 0..t {
            let go = &d_out.row(i)[cols.clone()];
            // dP_ij = dO_i · V_j, then the softmax Jacobian.
            let dp: Vec<f32> = (0..t).map(|j| crate::numerics::dot(go, &cache.v.row(j)[cols.clone()])).collect();
            let inner: f32 = (0..t).map(|j| dp[j] * p[(i, j)]).sum();
            for j in 0..t {
                let pij = p[(i, j)];
                for (a, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *a += pij * g;
                }
                let ds = pij * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f32> = cache.k.row(j)[cols.clone()].to_vec();
                let qi: Vec<f32> = cache.q.row(i)[cols.clone()].to_vec();
                for (a, x) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                    *a += ds * x;
                }
                for (a, x) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *a += ds * x;
                }
            }
        }
    }
    let wq = cache.z.t_matmul(&dq)?;
    let wk = cache.z.t_matmul(&dk)?;
    let wv = cache.z.t_matmul(&dv)?;
    let mut dz = dq.matmul_t(&proj.wq)?;
    dz.add_assign(&dk.matmul_t(&proj.wk)?)?;
    dz.add_assign(&dv.matmul_t(&proj.wv)?)?;
    Ok((wq, wk, wv, dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};

    #[test]
    fn rows_are_convex_combinations_of_values() {
        let mut rng = Rng::seed(1);
        let z = Matrix::randn(5, 4, 1.0, &mut rng);
        let p = QkvProjections::init(4, &mut rng);
        let (out, cache) = mha_forward(&z, &p, 2, true).unwrap();
        let cache = cache.unwrap();
        for pm in &cache.probs {
            for i in 0..5 {
                let s: f32 = pm.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let (_, _, v) = project_qkv(&z, &p).unwrap();
        for c in 0..4 {
            let lo = (0..5).map(|i| v[(i, c)]).fold(f32::INFINITY, f32::min);
            let hi = (0..5).map(|i| v[(i, c)]).fold(f32::NEG_INFINITY, f32::max);
            for i in 0..5 {
                assert!(out[(i, c)] >= lo - 1e-5 && out[(i, c)] <= hi + 1e-5);
            }
        }
        assert!(mha_forward(&z, &p, 3, false).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seed(2);
        let z = Matrix::randn(4, 4, 1.0, &mut rng);
        let p = QkvProjections::init(4, &mut rng);
        let w = Matrix::randn(4, 4, 1.0, &mut rng);
        let f = |z: &Matrix, p: &QkvProjections| -> f64 {
            let (o, _) = mha_forward(z, p, 2, false).unwrap();
            o.as_slice().iter().zip(w.as_slice()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (_, cache) = mha_forward(&z, &p, 2, true).unwrap();
        let (gq, gk, gv, gz) = mha_backward(&w, &cache.unwrap(), &p, 2).unwrap();
        let close = |a: &Matrix, fd: &Matrix| {
            let scale = fd.max_abs().max(1e-2);
            for (x, y) in a.as_slice().iter().zip(fd.as_slice()) {
                assert!((x - y).abs() <= 1e-3 * scale, "{x} vs {y}");
            }
        };
        close(&gz, &finite_diff_grad(|zz| f(zz, &p), &z, 1e-2).unwrap());
        close(&gq, &finite_diff_grad(|m| f(&z, &QkvProjections { wq: m.clone(), ..p.clone() }), &p.wq, 1e-2).unwrap());
        close(&gk, &finite_diff_grad(|m| f(&z, &QkvProjections { wk: m.clone(), ..p.clone() }), &p.wk, 1e-2).unwrap());
        close(&gv, &finite_diff_grad(|m| f(&z, &QkvProjections { wv: m.clone(), ..p.clone() }), &p.wv, 1e-2).unwrap());
    }
}

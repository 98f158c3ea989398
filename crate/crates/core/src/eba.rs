//! Efficient bitwise attention.
//!
//! Queries and keys are hashed to `±1` codes, so attention over `L` keys
//! collapses into a memory map built once per sequence:
//!
//! ```text
//! M = Σᵢ h(kᵢ) ⊗ vᵢ        (c × D)
//! k̄ = Σᵢ h(kᵢ)             (c integers)
//! out(q) = h(q)ᵀ M / h(q)ᵀ k̄
//! ```
//!
//! When `|h(q)ᵀ k̄| < ε` the output falls back to the mean of the value rows;
//! a negative denominator is used as is.

use crate::error::{Error, Result};
use crate::hash::{hash_backward, hash_encode_with, hash_trace, ste_backward, BinaryCode, HashEncoder, HashTrace, PackedCode};
use crate::numerics::{Matrix, Rng};

/// Counts of arithmetic operations performed by an attention path.
///
/// `code_mul` counts multiplications where one operand is a code entry;
/// the bitwise path must leave it at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub mul: u64,
    pub code_mul: u64,
    pub add: u64,
    pub div: u64,
    pub exp: u64,
}

/// Sink for operation counts. `()` discards them.
pub trait Tally {
    fn mul(&mut self, _n: u64) {}
    fn code_mul(&mut self, _n: u64) {}
    fn add(&mut self, _n: u64) {}
    fn div(&mut self, _n: u64) {}
    fn exp(&mut self, _n: u64) {}
}

impl Tally for () {}

impl Tally for OpCounts {
    fn mul(&mut self, n: u64) {
        self.mul += n;
    }
    fn code_mul(&mut self, n: u64) {
        self.code_mul += n;
    }
    fn add(&mut self, n: u64) {
        self.add += n;
    }
    fn div(&mut self, n: u64) {
        self.div += n;
    }
    fn exp(&mut self, n: u64) {
        self.exp += n;
    }
}

/// Bias-free query, key and value projections (`D × D` each).
#[derive(Clone, Debug, PartialEq)]
pub struct QkvProjections {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl QkvProjections {
    pub fn identity(d: usize) -> Self {
        QkvProjections {
            wq: Matrix::identity(d),
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
        }
    }

    /// Gaussian init with std `1/√D`.
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f32).sqrt();
        QkvProjections {
            wq: Matrix::randn(d, d, std, rng),
            wk: Matrix::randn(d, d, std, rng),
            wv: Matrix::randn(d, d, std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let d = self.wq.rows();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != (d, d) {
                return Err(Error::dim("QkvProjections", "projections must be square and equal"));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("QkvProjections"));
            }
        }
        Ok(())
    }
}

pub fn project_qkv(z: &Matrix, proj: &QkvProjections) -> Result<(Matrix, Matrix, Matrix)> {
    proj.check()?;
    Ok((z.matmul(&proj.wq)?, z.matmul(&proj.wk)?, z.matmul(&proj.wv)?))
}

/// Precomputed key–value memory.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnState {
    memory: Matrix,
    key_sum: Vec<i32>,
    key_total: i64,
    value_mean: Vec<f32>,
}

impl AttnState {
    /// `M`, `c × D`.
    pub fn memory(&self) -> &Matrix {
        &self.memory
    }

    /// `k̄`, one signed count per bit.
    pub fn key_sum(&self) -> &[i32] {
        &self.key_sum
    }

    /// Fallback output used when the denominator vanishes.
    pub fn value_mean(&self) -> &[f32] {
        &self.value_mean
    }

    pub fn code_bits(&self) -> usize {
        self.key_sum.len()
    }
}

fn value_mean(v: &Matrix) -> Vec<f32> {
    let mut mean = vec![0.0f32; v.cols()];
    for i in 0..v.rows() {
        for (m, &x) in mean.iter_mut().zip(v.row(i)) {
            *m += x;
        }
    }
    let n = v.rows() as f32;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn build_memory(k_codes: &[BinaryCode], v: &Matrix) -> Result<AttnState> {
    let packed: Vec<PackedCode> = k_codes.iter().map(BinaryCode::pack).collect();
    build_memory_packed(&packed, v, &mut ())
}

/// [`build_memory`] over packed key codes; rows of `V` are added or
/// subtracted per bit.
pub fn build_memory_packed<T: Tally>(k_codes: &[PackedCode], v: &Matrix, tally: &mut T) -> Result<AttnState> {
    if k_codes.is_empty() {
        return Err(Error::EmptyData("attention needs at least one key".into()));
    }
    if k_codes.len() != v.rows() {
        return Err(Error::dim("build_memory", format!("{} keys vs {} values", k_codes.len(), v.rows())));
    }
    let c = k_codes[0].len();
    if c == 0 || k_codes.iter().any(|k| k.len() != c) {
        return Err(Error::dim("build_memory", "inconsistent code length"));
    }
    let d = v.cols();
    let mut memory = Matrix::zeros(c, d);
    let mut key_sum = vec![0i32; c];
    for (i, code) in k_codes.iter().enumerate() {
        let vi = v.row(i);
        for b in 0..c {
            let negative = code.words()[b / 64] >> (b % 64) & 1 == 1;
            let row = memory.row_mut(b);
            if negative {
                key_sum[b] -= 1;
                for (m, &x) in row.iter_mut().zip(vi) {
                    *m -= x;
                }
            } else {
                key_sum[b] += 1;
                for (m, &x) in row.iter_mut().zip(vi) {
                    *m += x;
                }
            }
        }
        tally.add((c * (d + 1)) as u64);
    }
    let key_total = key_sum.iter().map(|&k| k as i64).sum();
    let value_mean = value_mean(v);
    tally.add((v.rows() * d) as u64);
    tally.div(d as u64);
    Ok(AttnState {
        memory,
        key_sum,
        key_total,
        value_mean,
    })
}

/// Float evaluation: `q` entries multiply rows of `M` and `k̄`.
pub fn attend(q_code: &BinaryCode, state: &AttnState, eps: f32) -> Result<Vec<f32>> {
    attend_counted(q_code, state, eps, &mut ())
}

pub fn attend_counted<T: Tally>(q_code: &BinaryCode, state: &AttnState, eps: f32, tally: &mut T) -> Result<Vec<f32>> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {eps}")));
    }
    let c = state.code_bits();
    if q_code.len() != c {
        return Err(Error::dim("attend", format!("query code of {} bits vs {c}", q_code.len())));
    }
    let d = state.memory.cols();
    let mut num = vec![0.0f32; d];
    let mut den = 0.0f32;
    for (b, &s) in q_code.signs().iter().enumerate() {
        let s = s as f32;
        for (n, &m) in num.iter_mut().zip(state.memory.row(b)) {
            *n += s * m;
        }
        den += s * state.key_sum[b] as f32;
    }
    tally.code_mul((c * (d + 1)) as u64);
    tally.add((c * (d + 1)) as u64);
    if den.abs() < eps {
        return Ok(state.value_mean.clone());
    }
    tally.div(d as u64);
    Ok(num.iter().map(|n| n / den).collect())
}

/// Bit-level evaluation: rows of `M` are added for clear bits and
/// subtracted for set bits, and `h(q)ᵀk̄ = Σk̄ − 2·Σ_{set} k̄_b`.
/// Returns exactly what [`attend`] returns.
pub fn attend_bitwise(q_packed: &PackedCode, state: &AttnState) -> Result<Vec<f32>> {
    attend_bitwise_counted(q_packed, state, &mut ())
}

pub fn attend_bitwise_counted<T: Tally>(q_packed: &PackedCode, state: &AttnState, tally: &mut T) -> Result<Vec<f32>> {
    let c = state.code_bits();
    if q_packed.len() != c {
        return Err(Error::dim("attend_bitwise", format!("query code of {} bits vs {c}", q_packed.len())));
    }
    let d = state.memory.cols();
    let mut num = vec![0.0f32; d];
    let mut negative_sum = 0i64;
    for b in 0..c {
        let row = state.memory.row(b);
        if q_packed.words()[b / 64] >> (b % 64) & 1 == 1 {
            for (n, &m) in num.iter_mut().zip(row) {
                *n -= m;
            }
        } else {
            for (n, &m) in num.iter_mut().zip(row) {
                *n += m;
            }
        }
    }
    tally.add((c * d) as u64);
    let mut set_bits = 0u64;
    for (w, &word) in q_packed.words().iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let b = w * 64 + bits.trailing_zeros() as usize;
            negative_sum += state.key_sum[b] as i64;
            bits &= bits - 1;
            set_bits += 1;
        }
    }
    let den = state.key_total - 2 * negative_sum;
    tally.add(set_bits + 1);
    if den == 0 {
        return Ok(state.value_mean.clone());
    }
    let den = den as f32;
    tally.div(d as u64);
    Ok(num.iter().map(|n| n / den).collect())
}

/// Per-query reference: codes recomputed for every query and key, and the
/// ratio `Σᵢ (h(q)·h(kᵢ)) vᵢ / Σᵢ h(q)·h(kᵢ)` summed in `f64` without
/// any memory map. `key_proj` hashes keys with a separate projection.
pub fn attn_oracle(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    encoder: &HashEncoder,
    key_proj: Option<&Matrix>,
    eps: f32,
) -> Result<Matrix> {
    if k.rows() != v.rows() || q.cols() != k.cols() || k.rows() == 0 {
        return Err(Error::dim("attn_oracle", "query/key/value shapes disagree"));
    }
    let kp = key_proj.unwrap_or(&encoder.proj);
    let d = v.cols();
    let mut out = Matrix::zeros(q.rows(), d);
    for j in 0..q.rows() {
        let (hq, _) = hash_encode_with(q.row(j), encoder, &encoder.proj)?;
        let mut num = vec![0.0f64; d];
        let mut den = 0.0f64;
        for i in 0..k.rows() {
            let (hk, _) = hash_encode_with(k.row(i), encoder, kp)?;
            let sim: i64 = hq
                .signs()
                .iter()
                .zip(hk.signs())
                .map(|(&a, &b)| (a as i64) * (b as i64))
                .sum();
            den += sim as f64;
            for (n, &x) in num.iter_mut().zip(v.row(i)) {
                *n += sim as f64 * x as f64;
            }
        }
        let row = out.row_mut(j);
        if den.abs() < eps as f64 {
            for (o, n) in row.iter_mut().enumerate() {
                *n = (0..v.rows()).map(|i| v[(i, o)] as f64).sum::<f64>() as f32 / v.rows() as f32;
            }
        } else {
            for (o, n) in row.iter_mut().zip(&num) {
                *o = (n / den) as f32;
            }
        }
    }
    Ok(out)
}

/// How codes are produced on the training path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarizer {
    /// `sign`, as at inference.
    Sign,
    /// `clamp(preact, −clip, clip)`; a smooth stand-in used by gradient checks.
    HardTanh,
}

/// Whether gradients flow into the codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeGrad {
    Ste,
    Detached,
}

/// Settings of the hashed attention block on the training path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSettings {
    pub clip: f32,
    pub eps: f32,
    /// Added to every query–key similarity. Zero gives bitwise attention;
    /// `c` gives the matching-bit count used by plain hash attention.
    pub offset: f32,
    pub binarizer: Binarizer,
    pub code_grad: CodeGrad,
}

impl BlockSettings {
    pub fn eba(clip: f32, eps: f32) -> Self {
        BlockSettings {
            clip,
            eps,
            offset: 0.0,
            binarizer: Binarizer::Sign,
            code_grad: CodeGrad::Ste,
        }
    }
}

/// Values saved by [`eba_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    z: Matrix,
    v: Matrix,
    q: Matrix,
    k: Matrix,
    q_traces: Vec<HashTrace>,
    k_traces: Vec<HashTrace>,
    hq: Matrix,
    hk: Matrix,
    memory: Matrix,
    key_sum: Vec<f32>,
    denom: Vec<f32>,
    fallback: Vec<bool>,
    out: Matrix,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Matrix,
    pub cache: Option<BlockCache>,
}

/// Gradients of the hashed attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct EbaGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub proj: Matrix,
    pub key_proj: Option<Matrix>,
    pub z: Matrix,
}

fn codes_of(traces: &[HashTrace], settings: &BlockSettings) -> Matrix {
    let c = traces[0].preact.len();
    let mut h = Matrix::zeros(traces.len(), c);
    for (j, t) in traces.iter().enumerate() {
        for (o, &p) in h.row_mut(j).iter_mut().zip(&t.preact) {
            *o = match settings.binarizer {
                Binarizer::Sign => {
                    if p < 0.0 {
                        -1.0
                    } else {
                        1.0
                    }
                }
                Binarizer::HardTanh => p.clamp(-settings.clip, settings.clip),
            };
        }
    }
    h
}

/// Dense hashed attention over lens rows `z` with the memory map formed in
/// floats. With [`Binarizer::Sign`] and zero offset the result equals
/// [`build_memory`] followed by [`attend_bitwise`] bit for bit.
pub fn eba_forward(
    z: &Matrix,
    proj: &QkvProjections,
    encoder: &HashEncoder,
    key_proj: Option<&Matrix>,
    settings: &BlockSettings,
    keep_cache: bool,
) -> Result<BlockOutput> {
    if z.rows() == 0 {
        return Err(Error::EmptyData("attention over zero tokens".into()));
    }
    if z.cols() != encoder.dim() {
        return Err(Error::dim("eba_forward", "token width differs from support width"));
    }
    let (q, k, v) = project_qkv(z, proj)?;
    let kp = key_proj.unwrap_or(&encoder.proj);
    let trace_rows = |m: &Matrix, a: &Matrix| -> Result<Vec<HashTrace>> {
        (0..m.rows())
            .map(|i| hash_trace(m.row(i), encoder.support(), a, encoder.sigma()))
            .collect()
    };
    let q_traces = trace_rows(&q, &encoder.proj)?;
    let k_traces = trace_rows(&k, kp)?;
    let hq = codes_of(&q_traces, settings);
    let hk = codes_of(&k_traces, settings);
    let t = z.rows();
    let c = hq.cols();
    let d = v.cols();

    let mut memory = Matrix::zeros(c, d);
    let mut key_sum = vec![0.0f32; c];
    for i in 0..t {
        let vi = v.row(i);
        for b in 0..c {
            let s = hk[(i, b)];
            key_sum[b] += s;
            for (m, &x) in memory.row_mut(b).iter_mut().zip(vi) {
                *m += s * x;
            }
        }
    }
    let mean = value_mean(&v);
    let v_sum: Vec<f32> = if settings.offset != 0.0 {
        let mut s = vec![0.0f32; d];
        for i in 0..t {
            for (a, &x) in s.iter_mut().zip(v.row(i)) {
                *a += x;
            }
        }
        s
    } else {
        Vec::new()
    };

    let mut out = Matrix::zeros(t, d);
    let mut denom = vec![0.0f32; t];
    let mut fallback = vec![false; t];
    for j in 0..t {
        let mut num = vec![0.0f32; d];
        let mut den = 0.0f32;
        for b in 0..c {
            let s = hq[(j, b)];
            for (n, &m) in num.iter_mut().zip(memory.row(b)) {
                *n += s * m;
            }
            den += s * key_sum[b];
        }
        if settings.offset != 0.0 {
            for (n, &s) in num.iter_mut().zip(&v_sum) {
                *n += settings.offset * s;
            }
            den += settings.offset * t as f32;
        }
        denom[j] = den;
        let row = out.row_mut(j);
        if den.abs() < settings.eps {
            fallback[j] = true;
            row.copy_from_slice(&mean);
        } else {
            for (o, n) in row.iter_mut().zip(&num) {
                *o = n / den;
            }
        }
    }
    let cache = keep_cache.then(|| BlockCache {
        z: z.clone(),
        v,
        q,
        k,
        q_traces,
        k_traces,
        hq,
        hk,
        memory,
        key_sum,
        denom,
        fallback,
        out: out.clone(),
    });
    Ok(BlockOutput { out, cache })
}

/// Backward of [`eba_forward`]. Values receive exact gradients; codes pass
/// gradients to their pre-activations through the clipped straight-through
/// estimator (unless detached). Denominators on the fallback branch are
/// constants.
pub fn eba_backward(
    d_out: &Matrix,
    forward: &BlockOutput,
    proj: &QkvProjections,
    encoder: &HashEncoder,
    key_proj: Option<&Matrix>,
    settings: &BlockSettings,
) -> Result<EbaGrads> {
    let cache = forward
        .cache
        .as_ref()
        .ok_or_else(|| Error::State("attention backward needs a training-mode cache".into()))?;
    let t = cache.z.rows();
    let d = cache.v.cols();
    let c = cache.hq.cols();
    if d_out.shape() != (t, d) {
        return Err(Error::dim("eba_backward", "upstream gradient shape"));
    }
    let mut dm = Matrix::zeros(c, d);
    let mut dkbar = vec![0.0f32; c];
    let mut dhq = Matrix::zeros(t, c);
    let mut dv = Matrix::zeros(t, d);
    let mut dn_total = vec![0.0f32; d];
    for j in 0..t {
        let g = d_out.row(j);
        if cache.fallback[j] {
            for i in 0..t {
                for (a, &x) in dv.row_mut(i).iter_mut().zip(g) {
                    *a += x / t as f32;
                }
            }
            continue;
        }
        let den = cache.denom[j];
        let dn: Vec<f32> = g.iter().map(|x| x / den).collect();
        let dd = -crate::numerics::dot(g, cache.out.row(j)) / den;
        for b in 0..c {
            let s = cache.hq[(j, b)];
            dhq[(j, b)] = crate::numerics::dot(cache.memory.row(b), &dn) + cache.key_sum[b] * dd;
            for (a, &x) in dm.row_mut(b).iter_mut().zip(&dn) {
                *a += s * x;
            }
            dkbar[b] += s * dd;
        }
        if settings.offset != 0.0 {
            for (a, &x) in dn_total.iter_mut().zip(&dn) {
                *a += settings.offset * x;
            }
        }
    }
    let mut dhk = Matrix::zeros(t, c);
    for i in 0..t {
        let vi = cache.v.row(i);
        let mut acc = dn_total.clone();
        for b in 0..c {
            let s = cache.hk[(i, b)];
            let dmb = dm.row(b);
            for (a, &x) in acc.iter_mut().zip(dmb) {
                *a += s * x;
            }
            dhk[(i, b)] = crate::numerics::dot(dmb, vi) + dkbar[b];
        }
        for (a, x) in dv.row_mut(i).iter_mut().zip(acc) {
            *a += x;
        }
    }

    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dproj = Matrix::zeros(encoder.proj.rows(), encoder.proj.cols());
    let mut dkey_proj = key_proj.map(|kp| Matrix::zeros(kp.rows(), kp.cols()));
    if settings.code_grad == CodeGrad::Ste {
        for j in 0..t {
            let tr = &cache.q_traces[j];
            let dp = ste_backward(dhq.row(j), &tr.preact, settings.clip);
            let g = hash_backward(&dp, tr, cache.q.row(j), encoder.support(), &encoder.proj, encoder.sigma(), &mut dproj);
            dq.row_mut(j).copy_from_slice(&g);
        }
        for i in 0..t {
            let tr = &cache.k_traces[i];
            let dp = ste_backward(dhk.row(i), &tr.preact, settings.clip);
            let (a, acc) = match (key_proj, dkey_proj.as_mut()) {
                (Some(kp), Some(acc)) => (kp, acc),
                _ => (&encoder.proj, &mut dproj),
            };
            let g = hash_backward(&dp, tr, cache.k.row(i), encoder.support(), a, encoder.sigma(), acc);
            dk.row_mut(i).copy_from_slice(&g);
        }
    }
    let wq = cache.z.t_matmul(&dq)?;
    let wk = cache.z.t_matmul(&dk)?;
    let wv = cache.z.t_matmul(&dv)?;
    let mut dz = dq.matmul_t(&proj.wq)?;
    dz.add_assign(&dk.matmul_t(&proj.wk)?)?;
    dz.add_assign(&dv.matmul_t(&proj.wv)?)?;
    Ok(EbaGrads {
        wq,
        wk,
        wv,
        proj: dproj,
        key_proj: dkey_proj,
        z: dz,
    })
}

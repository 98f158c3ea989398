//! RBF-kernel binary hashing.
//!
//! A vector `x` is compared with `m` support rows through an RBF kernel,
//! the kernel vector is centered by its own mean and projected with `A`
//! (`m × c`); the signs of the projection are the `c`-bit code:
//!
//! ```text
//! κᵢ(x) = exp(−‖x − sᵢ‖² / 2σ²)      μ = mean(κ)
//! h(x)  = sign((κ(x) − μ·1)ᵀ A)      sign(0) = +1
//! ```
//!
//! Training pushes gradients through the sign with a clipped straight-through
//! estimator. Support rows are constants for the backward pass.

use crate::data::CalibSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Matrix, Rng};

/// A `±1` code of length `c`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    signs: Vec<i8>,
}

impl BinaryCode {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Domain("code entries must be +1 or -1".into()));
        }
        Ok(BinaryCode { signs })
    }

    /// Elementwise sign with `sign(0) = +1`.
    pub fn from_preact(preact: &[f32]) -> Self {
        BinaryCode {
            signs: preact.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect(),
        }
    }

    pub fn all_positive(len: usize) -> Self {
        BinaryCode { signs: vec![1; len] }
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn negated(&self) -> BinaryCode {
        BinaryCode {
            signs: self.signs.iter().map(|s| -s).collect(),
        }
    }

    pub fn pack(&self) -> PackedCode {
        let mut words = vec![0u64; self.signs.len().div_ceil(64)];
        for (i, &s) in self.signs.iter().enumerate() {
            if s < 0 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        PackedCode {
            words,
            len: self.signs.len(),
        }
    }
}

/// Bit-packed code: 64-bit words, entry `i` in bit `i % 64` of word `i / 64`
/// (least significant first). A set bit means `−1`, a clear bit `+1`; unused
/// high bits of the last word are zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedCode {
    words: Vec<u64>,
    len: usize,
}

impl PackedCode {
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::dim("PackedCode", format!("{} words for {len} bits", words.len())));
        }
        if len % 64 != 0 {
            if let Some(last) = words.last() {
                if last >> (len % 64) != 0 {
                    return Err(Error::Domain("padding bits must be zero".into()));
                }
            }
        }
        Ok(PackedCode { words, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Number of `−1` entries.
    pub fn negatives(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn unpack(&self) -> BinaryCode {
        BinaryCode {
            signs: (0..self.len)
                .map(|i| if self.words[i / 64] >> (i % 64) & 1 == 1 { -1 } else { 1 })
                .collect(),
        }
    }
}

/// Whether the support set may still be replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportMode {
    Dynamic,
    Frozen,
}

/// Support set `S` (`m × D`), projection `A` (`m × c`) and bandwidth `σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoder {
    support: Matrix,
    pub proj: Matrix,
    sigma: f32,
    mode: SupportMode,
}

impl HashEncoder {
    pub fn new(support: Matrix, proj: Matrix, sigma: f32) -> Result<Self> {
        if support.rows() == 0 || proj.cols() == 0 {
            return Err(Error::Domain("hash encoder needs m >= 1 and c >= 1".into()));
        }
        if support.rows() != proj.rows() {
            return Err(Error::dim(
                "HashEncoder",
                format!("{} support rows vs projection {}x{}", support.rows(), proj.rows(), proj.cols()),
            ));
        }
        check_sigma(sigma)?;
        Ok(HashEncoder {
            support,
            proj,
            sigma,
            mode: SupportMode::Dynamic,
        })
    }

    /// Projection initialized `N(0, 1/m)`.
    pub fn init(support: Matrix, code_bits: usize, rng: &mut Rng) -> Result<Self> {
        let m = support.rows();
        let proj = Matrix::randn(m, code_bits, 1.0 / (m.max(1) as f32).sqrt(), rng);
        let sigma = median_bandwidth(&support);
        HashEncoder::new(support, proj, sigma)
    }

    pub fn support(&self) -> &Matrix {
        &self.support
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn mode(&self) -> SupportMode {
        self.mode
    }

    pub fn is_frozen(&self) -> bool {
        self.mode == SupportMode::Frozen
    }

    pub fn support_size(&self) -> usize {
        self.support.rows()
    }

    pub fn code_bits(&self) -> usize {
        self.proj.cols()
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    /// Replaces `S` and recomputes `σ` with [`median_bandwidth`].
    pub fn set_support(&mut self, support: Matrix) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::State("support set is frozen".into()));
        }
        if support.shape() != self.support.shape() {
            return Err(Error::dim("set_support", "support shape changed"));
        }
        self.sigma = median_bandwidth(&support);
        self.support = support;
        Ok(())
    }

    /// Marks the support immutable.
    pub fn freeze(&mut self) {
        self.mode = SupportMode::Frozen;
    }

    /// Rebuilds a frozen encoder from stored parts (model loading).
    pub fn frozen(support: Matrix, proj: Matrix, sigma: f32) -> Result<Self> {
        let mut e = HashEncoder::new(support, proj, sigma)?;
        e.freeze();
        Ok(e)
    }

    pub(crate) fn set_mode(&mut self, mode: SupportMode) {
        self.mode = mode;
    }
}

fn check_sigma(sigma: f32) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("RBF bandwidth must be > 0, got {sigma}")));
    }
    Ok(())
}

/// `κᵢ = exp(−‖x − sᵢ‖² / 2σ²)` for every support row.
pub fn rbf_vector(x: &[f32], support: &Matrix, sigma: f32) -> Result<Vec<f32>> {
    check_sigma(sigma)?;
    if x.len() != support.cols() {
        return Err(Error::dim(
            "rbf_vector",
            format!("vector of {} vs support dimension {}", x.len(), support.cols()),
        ));
    }
    Ok(rbf_unchecked(x, support, sigma))
}

fn rbf_unchecked(x: &[f32], support: &Matrix, sigma: f32) -> Vec<f32> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    (0..support.rows())
        .map(|i| {
            let mut d2 = 0.0f32;
            for (a, b) in x.iter().zip(support.row(i)) {
                let diff = a - b;
                d2 += diff * diff;
            }
            (-d2 * inv).exp()
        })
        .collect()
}

/// Intermediate values of one encode, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTrace {
    pub kappa: Vec<f32>,
    pub centered: Vec<f32>,
    pub preact: Vec<f32>,
}

/// Kernel, centering and projection for `x` against `support` and `proj`.
pub fn hash_trace(x: &[f32], support: &Matrix, proj: &Matrix, sigma: f32) -> Result<HashTrace> {
    let kappa = rbf_vector(x, support, sigma)?;
    if proj.rows() != kappa.len() {
        return Err(Error::dim("hash_trace", "projection rows differ from support size"));
    }
    let mu = kappa.iter().sum::<f32>() / kappa.len() as f32;
    let centered: Vec<f32> = kappa.iter().map(|k| k - mu).collect();
    let mut preact = vec![0.0f32; proj.cols()];
    for (i, &c) in centered.iter().enumerate() {
        for (p, &a) in preact.iter_mut().zip(proj.row(i)) {
            *p += c * a;
        }
    }
    Ok(HashTrace {
        kappa,
        centered,
        preact,
    })
}

/// Code and pre-activation `(κ(x) − μ·1)ᵀ A` of `x`.
pub fn hash_encode(x: &[f32], encoder: &HashEncoder) -> Result<(BinaryCode, Vec<f32>)> {
    hash_encode_with(x, encoder, &encoder.proj)
}

/// [`hash_encode`] with a projection other than the encoder's own (separate
/// key hashing).
pub fn hash_encode_with(x: &[f32], encoder: &HashEncoder, proj: &Matrix) -> Result<(BinaryCode, Vec<f32>)> {
    let trace = hash_trace(x, &encoder.support, proj, encoder.sigma)?;
    Ok((BinaryCode::from_preact(&trace.preact), trace.preact))
}

/// Clipped straight-through estimator: the upstream gradient passes where
/// `|preact| ≤ clip` and is zeroed elsewhere.
pub fn ste_backward(d_code: &[f32], preact: &[f32], clip: f32) -> Vec<f32> {
    d_code
        .iter()
        .zip(preact)
        .map(|(&g, &p)| if p.abs() <= clip { g } else { 0.0 })
        .collect()
}

/// Backward of [`hash_trace`] from a pre-activation gradient. Accumulates
/// into `d_proj` and returns the gradient with respect to `x`.
pub fn hash_backward(
    d_preact: &[f32],
    trace: &HashTrace,
    x: &[f32],
    support: &Matrix,
    proj: &Matrix,
    sigma: f32,
    d_proj: &mut Matrix,
) -> Vec<f32> {
    let m = trace.kappa.len();
    let mut d_centered = vec![0.0f32; m];
    for i in 0..m {
        let a_row = proj.row(i);
        let c = trace.centered[i];
        let g_row = d_proj.row_mut(i);
        let mut acc = 0.0f32;
        for b in 0..d_preact.len() {
            g_row[b] += c * d_preact[b];
            acc += a_row[b] * d_preact[b];
        }
        d_centered[i] = acc;
    }
    // Centering is the projector I − 11ᵀ/m, which is symmetric.
    let mean = d_centered.iter().sum::<f32>() / m as f32;
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut dx = vec![0.0f32; x.len()];
    for i in 0..m {
        let w = (d_centered[i] - mean) * trace.kappa[i] * inv_s2;
        if w == 0.0 {
            continue;
        }
        for (g, (&xi, &si)) in dx.iter_mut().zip(x.iter().zip(support.row(i))) {
            *g += w * (si - xi);
        }
    }
    dx
}

/// Draws `m` support rows uniformly from all rows of `batch`.
///
/// Without replacement when enough rows exist (in natural order when there
/// are exactly `m`), with replacement otherwise.
pub fn sample_support(batch: &[Matrix], m: usize, rng: &mut Rng) -> Result<Matrix> {
    let total: usize = batch.iter().map(Matrix::rows).sum();
    if total == 0 || m == 0 {
        return Err(Error::EmptyData("support sampling needs a non-empty batch and m >= 1".into()));
    }
    let d = batch[0].cols();
    if batch.iter().any(|z| z.cols() != d) {
        return Err(Error::dim("sample_support", "lens rows of different width"));
    }
    let picks: Vec<usize> = if total == m {
        (0..m).collect()
    } else if total > m {
        rand::seq::index::sample(rng, total, m).into_vec()
    } else {
        (0..m).map(|_| rng.below(total)).collect()
    };
    let mut offsets = Vec::with_capacity(batch.len());
    let mut acc = 0;
    for z in batch {
        offsets.push(acc);
        acc += z.rows();
    }
    let mut data = Vec::with_capacity(m * d);
    for p in picks {
        let which = offsets.partition_point(|&o| o <= p) - 1;
        data.extend_from_slice(batch[which].row(p - offsets[which]));
    }
    Matrix::from_vec(m, d, data)
}

/// Median pairwise distance between support rows, or 1 when it is zero or
/// fewer than two rows exist.
pub fn median_bandwidth(support: &Matrix) -> f32 {
    let m = support.rows();
    if m < 2 {
        log::warn!("median bandwidth needs at least 2 support rows; using sigma = 1");
        return 1.0;
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let d2: f64 = support
                .row(i)
                .iter()
                .zip(support.row(j))
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    let sigma = median as f32;
    if sigma > 0.0 && sigma.is_finite() {
        sigma
    } else {
        1.0
    }
}

/// Samples a final support set from the lens rows of `data` under `model`'s
/// current parameters and returns the model's encoder with that support,
/// its median bandwidth, and the support frozen.
pub fn freeze_support(model: &Model, data: &[CalibSample], m: usize, rng: &mut Rng) -> Result<HashEncoder> {
    if !model.is_fitted() {
        return Err(Error::State("cannot freeze the support of an untrained model".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyData("freezing needs at least one sample".into()));
    }
    let Some(encoder) = model.encoder() else {
        return Err(Error::State("model has no hash encoder".into()));
    };
    if m != encoder.support_size() {
        return Err(Error::dim("freeze_support", "m differs from the configured support size"));
    }
    let lens = data
        .iter()
        .map(|s| model.lens_representation(&s.x))
        .collect::<Result<Vec<_>>>()?;
    let support = sample_support(&lens, m, rng)?;
    let mut enc = encoder.clone();
    enc.set_mode(SupportMode::Dynamic);
    enc.set_support(support)?;
    enc.freeze();
    Ok(enc)
}

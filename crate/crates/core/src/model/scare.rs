use crate::eba::{
    attend_bitwise_counted, build_memory_packed, eba_backward, eba_forward, Binarizer, BlockOutput, BlockSettings,
    CodeGrad, EbaGrads, OpCounts, QkvProjections, Tally,
};
use crate::error::{Error, Result};
use crate::hash::{hash_trace, BinaryCode, HashEncoder, PackedCode};
use crate::numerics::{Matrix, Rng};
use crate::slp::{slp_backward, slp_forward, SlpParams};

use super::mha::{mha_backward, mha_forward, MhaCache};
use super::{Attention, Embedding, Gradients, Mode, ModelConfig, Patching};

/// `E = X·W_loc + 1·(x̄·W_glob)`, where `x̄` is the per-feature window mean.
/// Without `w_glob` only the local term remains.
pub fn embed(x: &Matrix, w_loc: &Matrix, w_glob: Option<&Matrix>) -> Result<Matrix> {
    let mut e = x.matmul(w_loc)?;
    if let Some(wg) = w_glob {
        let g = x.column_means().matmul(wg)?;
        if g.cols() != e.cols() {
            return Err(Error::dim("embed", "local and global widths differ"));
        }
        for r in 0..e.rows() {
            for (a, &b) in e.row_mut(r).iter_mut().zip(g.row(0)) {
                *a += b;
            }
        }
    }
    Ok(e)
}

/// One-block SCARE network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScareNet {
    pub w_loc: Matrix,
    pub w_glob: Option<Matrix>,
    pub slp: Option<SlpParams>,
    pub qkv: QkvProjections,
    pub hash: Option<HashEncoder>,
    /// Separate key projection when queries and keys are hashed apart.
    pub key_proj: Option<Matrix>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// `(T·D) × 1`.
    pub head_w: Matrix,
    pub head_b: Matrix,
    pub attention: Attention,
    pub heads: usize,
    pub clip: f32,
    pub eps: f32,
    pub binarizer: Binarizer,
    pub code_grad: CodeGrad,
}

#[derive(Clone, Debug)]
enum AttnCache {
    Hashed(BlockOutput),
    Mha(MhaCache),
}

#[derive(Clone, Debug)]
pub(crate) struct ScareCache {
    x: Matrix,
    e: Matrix,
    attn: AttnCache,
    h1: Matrix,
    pre1: Matrix,
    r: Matrix,
    h2: Matrix,
}

impl ScareNet {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<ScareNet> {
        let (n, din, d, dff) = (cfg.window, cfg.input_dim, cfg.d_model, cfg.d_ff);
        let t = cfg.tokens();
        let emb_std = 1.0 / (din as f32).sqrt();
        let w_loc = Matrix::randn(din, d, emb_std, rng);
        let w_glob = (cfg.embedding == Embedding::Dual).then(|| Matrix::randn(din, d, emb_std, rng));
        let slp = match cfg.patching {
            Patching::Slp => Some(SlpParams::init(n, d, 0.01, rng)?),
            Patching::None => None,
        };
        let qkv = QkvProjections::init(d, rng);
        let (hash, key_proj) = if cfg.uses_hash() {
            // Placeholder support until the trainer draws one from lens rows.
            let support = Matrix::randn(cfg.support, d, 1.0, rng);
            let enc = HashEncoder::init(support, cfg.code_bits, rng)?;
            let kp = (!cfg.shared_hash)
                .then(|| Matrix::randn(cfg.support, cfg.code_bits, 1.0 / (cfg.support as f32).sqrt(), rng));
            (Some(enc), kp)
        } else {
            (None, None)
        };
        let w1 = Matrix::randn(d, dff, (2.0 / d as f32).sqrt(), rng);
        let w2 = Matrix::randn(dff, d, 1.0 / (dff as f32).sqrt(), rng);
        let head_w = Matrix::randn(t * d, 1, 1.0 / ((t * d) as f32).sqrt(), rng);
        Ok(ScareNet {
            w_loc,
            w_glob,
            slp,
            qkv,
            hash,
            key_proj,
            w1,
            b1: Matrix::zeros(1, dff),
            w2,
            b2: Matrix::zeros(1, d),
            head_w,
            head_b: Matrix::zeros(1, 1),
            attention: cfg.attention,
            heads: cfg.heads,
            clip: cfg.clip,
            eps: cfg.eps,
            binarizer: Binarizer::Sign,
            code_grad: CodeGrad::Ste,
        })
    }

    fn settings(&self) -> BlockSettings {
        let offset = match self.attention {
            Attention::Hash => self.code_bits() as f32,
            _ => 0.0,
        };
        BlockSettings {
            clip: self.clip,
            eps: self.eps,
            offset,
            binarizer: self.binarizer,
            code_grad: self.code_grad,
        }
    }

    fn code_bits(&self) -> usize {
        self.hash.as_ref().map_or(0, HashEncoder::code_bits)
    }

    fn encoder(&self) -> Result<&HashEncoder> {
        self.hash
            .as_ref()
            .ok_or_else(|| Error::State("hashed attention without an encoder".into()))
    }

    /// Lens rows `Z` of `x` (the embedding itself without patching).
    pub fn lens(&self, x: &Matrix) -> Result<Matrix> {
        let e = embed(x, &self.w_loc, self.w_glob.as_ref())?;
        match &self.slp {
            Some(p) => slp_forward(&e, p),
            None => Ok(e),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix, mode: Mode) -> Result<(f32, Option<ScareCache>)> {
        let e = embed(x, &self.w_loc, self.w_glob.as_ref())?;
        let z = match &self.slp {
            Some(p) => slp_forward(&e, p)?,
            None => e.clone(),
        };
        let train = mode == Mode::Train;
        let (a, attn) = match (self.attention, mode) {
            (Attention::Mha, _) => {
                let (out, cache) = mha_forward(&z, &self.qkv, self.heads, train)?;
                (out, cache.map(AttnCache::Mha))
            }
            (_, Mode::Train) => {
                let out = eba_forward(&z, &self.qkv, self.encoder()?, self.key_proj.as_ref(), &self.settings(), true)?;
                (out.out.clone(), Some(AttnCache::Hashed(out)))
            }
            (_, Mode::Infer) => (self.infer_attention(&z, &mut ())?, None),
        };
        let mut h1 = z.clone();
        h1.add_assign(&a)?;
        let mut pre1 = h1.matmul(&self.w1)?;
        add_row(&mut pre1, &self.b1);
        let mut r = pre1.clone();
        r.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut f = r.matmul(&self.w2)?;
        add_row(&mut f, &self.b2);
        let mut h2 = h1.clone();
        h2.add_assign(&f)?;
        let raw = crate::numerics::dot(h2.as_slice(), self.head_w.as_slice()) + self.head_b[(0, 0)];
        let cache = match attn {
            Some(attn) if train => Some(ScareCache {
                x: x.clone(),
                e,
                attn,
                h1,
                pre1,
                r,
                h2,
            }),
            _ => None,
        };
        Ok((raw, cache))
    }

    /// Deployment attention: packed codes against a frozen support.
    fn infer_attention<T: Tally>(&self, z: &Matrix, tally: &mut T) -> Result<Matrix> {
        let enc = self.encoder()?;
        if !enc.is_frozen() {
            return Err(Error::State("inference needs a frozen support set".into()));
        }
        let (q, k, v) = crate::eba::project_qkv(z, &self.qkv)?;
        let kp = self.key_proj.as_ref().unwrap_or(&enc.proj);
        let codes = |m: &Matrix, a: &Matrix| -> Result<Vec<PackedCode>> {
            (0..m.rows())
                .map(|i| {
                    let t = hash_trace(m.row(i), enc.support(), a, enc.sigma())?;
                    Ok(BinaryCode::from_preact(&t.preact).pack())
                })
                .collect()
        };
        let hq = codes(&q, &enc.proj)?;
        let hk = codes(&k, kp)?;
        let t = z.rows();
        let mut out = Matrix::zeros(t, v.cols());
        match self.attention {
            Attention::Eba => {
                let state = build_memory_packed(&hk, &v, tally)?;
                for (j, code) in hq.iter().enumerate() {
                    out.row_mut(j).copy_from_slice(&attend_bitwise_counted(code, &state, tally)?);
                }
            }
            Attention::Hash => {
                let c = enc.code_bits() as i64;
                for (j, qc) in hq.iter().enumerate() {
                    let mut num = vec![0.0f32; v.cols()];
                    let mut den = 0i64;
                    for (i, kc) in hk.iter().enumerate() {
                        let differ: i64 = qc
                            .words()
                            .iter()
                            .zip(kc.words())
                            .map(|(a, b)| (a ^ b).count_ones() as i64)
                            .sum();
                        // c + h(q)·h(k) = 2·(matching bits)
                        let sim = 2 * (c - differ);
                        den += sim;
                        let s = sim as f32;
                        for (n, &x) in num.iter_mut().zip(v.row(i)) {
                            *n += s * x;
                        }
                    }
                    tally.add((t * (v.cols() + qc.words().len() + 1)) as u64);
                    tally.mul((t * v.cols()) as u64);
                    let row = out.row_mut(j);
                    if den == 0 {
                        let mean = v.column_means();
                        row.copy_from_slice(mean.row(0));
                    } else {
                        tally.div(v.cols() as u64);
                        for (o, n) in row.iter_mut().zip(num) {
                            *o = n / den as f32;
                        }
                    }
                }
            }
            Attention::Mha => unreachable!("multi-head attention has no hashed path"),
        }
        Ok(out)
    }

    pub(crate) fn attention_op_counts(&self, x: &Matrix) -> Result<OpCounts> {
        let z = self.lens(x)?;
        let mut counts = OpCounts::default();
        match self.attention {
            Attention::Mha => {
                let (t, d) = z.shape();
                let dh = d / self.heads;
                let per_head = (t * t * dh) as u64;
                counts.mul = self.heads as u64 * 2 * per_head + (t * t) as u64;
                counts.add = self.heads as u64 * (2 * per_head + (t * t) as u64);
                counts.exp = (self.heads * t * t) as u64;
                counts.div = (self.heads * t * t) as u64;
            }
            _ => {
                self.infer_attention(&z, &mut counts)?;
            }
        }
        Ok(counts)
    }

    pub(crate) fn backward(&self, c: &ScareCache, draw: f32) -> Result<Gradients> {
        let (t, d) = c.h2.shape();
        let d_head_w = Matrix::from_vec(t * d, 1, c.h2.as_slice().iter().map(|v| v * draw).collect())?;
        let d_head_b = Matrix::filled(1, 1, draw);
        let dh2 = Matrix::from_vec(t, d, self.head_w.as_slice().iter().map(|w| w * draw).collect())?;
        // FFN with residual.
        let dw2 = c.r.t_matmul(&dh2)?;
        let db2 = dh2.column_sums();
        let mut dpre1 = dh2.matmul_t(&self.w2)?;
        for (g, &p) in dpre1.as_mut_slice().iter_mut().zip(c.pre1.as_slice()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let dw1 = c.h1.t_matmul(&dpre1)?;
        let db1 = dpre1.column_sums();
        let mut dh1 = dh2;
        dh1.add_assign(&dpre1.matmul_t(&self.w1)?)?;
        // Attention with residual.
        let mut dz = dh1.clone();
        let (wq, wk, wv, dproj, dkey) = match &c.attn {
            AttnCache::Mha(mc) => {
                let (wq, wk, wv, dzz) = mha_backward(&dh1, mc, &self.qkv, self.heads)?;
                dz.add_assign(&dzz)?;
                (wq, wk, wv, None, None)
            }
            AttnCache::Hashed(out) => {
                let EbaGrads {
                    wq,
                    wk,
                    wv,
                    proj,
                    key_proj,
                    z,
                } = eba_backward(&dh1, out, &self.qkv, self.encoder()?, self.key_proj.as_ref(), &self.settings())?;
                dz.add_assign(&z)?;
                (wq, wk, wv, Some(proj), key_proj)
            }
        };
        let (de, slp_grads) = match &self.slp {
            Some(p) => {
                let g = slp_backward(&dz, &c.e, p)?;
                (g.dx, Some((g.dw, g.db)))
            }
            None => (dz, None),
        };
        let dw_loc = c.x.t_matmul(&de)?;
        let mut entries: Vec<(&'static str, Matrix)> = vec![("embed.local", dw_loc)];
        if self.w_glob.is_some() {
            let dw_glob = c.x.column_means().t_matmul(&de.column_sums())?;
            entries.push(("embed.global", dw_glob));
        }
        if let Some((dw, db)) = slp_grads {
            entries.push(("slp.w", dw));
            entries.push(("slp.b", db));
        }
        entries.push(("attn.wq", wq));
        entries.push(("attn.wk", wk));
        entries.push(("attn.wv", wv));
        if let Some(p) = dproj {
            entries.push(("hash.proj", p));
        }
        if let Some(k) = dkey {
            entries.push(("hash.key_proj", k));
        }
        entries.push(("ffn.w1", dw1));
        entries.push(("ffn.b1", db1));
        entries.push(("ffn.w2", dw2));
        entries.push(("ffn.b2", db2));
        entries.push(("head.w", d_head_w));
        entries.push(("head.b", d_head_b));
        Ok(Gradients::new(entries))
    }

    pub(crate) fn trainable(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = vec![("embed.local", &self.w_loc)];
        if let Some(g) = &self.w_glob {
            out.push(("embed.global", g));
        }
        if let Some(p) = &self.slp {
            out.push(("slp.w", &p.w));
            out.push(("slp.b", &p.b));
        }
        out.push(("attn.wq", &self.qkv.wq));
        out.push(("attn.wk", &self.qkv.wk));
        out.push(("attn.wv", &self.qkv.wv));
        if let Some(h) = &self.hash {
            out.push(("hash.proj", &h.proj));
        }
        if let Some(k) = &self.key_proj {
            out.push(("hash.key_proj", k));
        }
        out.push(("ffn.w1", &self.w1));
        out.push(("ffn.b1", &self.b1));
        out.push(("ffn.w2", &self.w2));
        out.push(("ffn.b2", &self.b2));
        out.push(("head.w", &self.head_w));
        out.push(("head.b", &self.head_b));
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.w_loc];
        if let Some(g) = &mut self.w_glob {
            out.push(g);
        }
        if let Some(p) = &mut self.slp {
            out.push(&mut p.w);
            out.push(&mut p.b);
        }
        out.push(&mut self.qkv.wq);
        out.push(&mut self.qkv.wk);
        out.push(&mut self.qkv.wv);
        if let Some(h) = &mut self.hash {
            out.push(&mut h.proj);
        }
        if let Some(k) = &mut self.key_proj {
            out.push(k);
        }
        out.push(&mut self.w1);
        out.push(&mut self.b1);
        out.push(&mut self.w2);
        out.push(&mut self.b2);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

fn add_row(m: &mut Matrix, row: &Matrix) {
    for r in 0..m.rows() {
        for (a, &b) in m.row_mut(r).iter_mut().zip(row.row(0)) {
            *a += b;
        }
    }
}

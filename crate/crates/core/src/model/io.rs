//! Binary model container.
//!
//! ```text
//! magic        4 bytes   "SCRE"
//! version      u16 LE    1
//! flags        u8        bit 0: fitted, bit 1: support frozen
//! config_len   u32 LE
//! config       UTF-8 `key=value` lines (model keys)
//! tensor_count u32 LE
//! tensor_count records:
//!   name_len u16 LE, name (UTF-8), rank u8, dims u32 LE × rank,
//!   f32 LE × product(dims), row-major
//! ```
//!
//! Tensors are the trainable ones (see `Model::trainable`) plus
//! `hash.support` and `hash.sigma` for hashed attention and `output.affine`
//! (`[scale, shift]`).

use std::fs;
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::hash::SupportMode;
use crate::numerics::{Matrix, Rng};

use super::{Model, ModelConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"SCRE";
pub const MODEL_VERSION: u16 = 1;

const FLAG_FITTED: u8 = 1;
const FLAG_FROZEN: u8 = 2;

fn tensors(model: &Model) -> Vec<(&'static str, Matrix)> {
    let mut out: Vec<(&'static str, Matrix)> = model.trainable().into_iter().map(|(n, m)| (n, m.clone())).collect();
    if let Some(enc) = model.encoder() {
        out.push(("hash.support", enc.support().clone()));
        out.push(("hash.sigma", Matrix::filled(1, 1, enc.sigma())));
    }
    let (scale, shift) = model.output_affine();
    out.push(("output.affine", Matrix::from_fn(1, 2, |_, c| if c == 0 { scale } else { shift })));
    out
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let mut flags = 0u8;
    if model.is_fitted() {
        flags |= FLAG_FITTED;
    }
    if model.encoder().is_some_and(|e| e.is_frozen()) {
        flags |= FLAG_FROZEN;
    }
    buf.push(flags);
    let config: String = model
        .config()
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let ts = tensors(model);
    buf.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for (name, m) in ts {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(2);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic bytes)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "model format version {version} is not supported (expected {MODEL_VERSION})"
        )));
    }
    let flags = r.u8()?;
    let config_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Corrupt("config block is not UTF-8".into()))?;
    let mut pairs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("bad config line `{line}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let config = ModelConfig::from_kv(&pairs).map_err(|e| Error::Corrupt(format!("config block: {e}")))?;

    let count = r.u32()? as usize;
    let mut records: Vec<(String, Matrix)> = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Corrupt(format!("tensor `{name}` has rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
        records.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let stats = NormStats {
        mean: vec![0.0; config.input_dim],
        std: vec![1.0; config.input_dim],
        target_mean: 0.0,
        target_std: 1.0,
    };
    let mut model = Model::new(&config, &stats, &mut Rng::seed(0))?;
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
        let idx = records
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
        let (_, m) = records.swap_remove(idx);
        if m.shape() != shape {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                shape.0,
                shape.1
            )));
        }
        Ok(m)
    };
    let names: Vec<(&'static str, (usize, usize))> = model.trainable().iter().map(|(n, m)| (*n, m.shape())).collect();
    let mut loaded = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        loaded.push(take(name, *shape)?);
    }
    for (slot, m) in model.trainable_mut().into_iter().zip(loaded) {
        *slot = m;
    }
    if let Some(enc) = model.encoder() {
        let shape = enc.support().shape();
        let support = take("hash.support", shape)?;
        let sigma = take("hash.sigma", (1, 1))?[(0, 0)];
        let proj = enc.proj.clone();
        let mut rebuilt = crate::hash::HashEncoder::new(support, proj, sigma)
            .map_err(|e| Error::Corrupt(format!("hash encoder: {e}")))?;
        rebuilt.set_mode(if flags & FLAG_FROZEN != 0 {
            SupportMode::Frozen
        } else {
            SupportMode::Dynamic
        });
        model.set_encoder(rebuilt)?;
    }
    let affine = take("output.affine", (1, 2))?;
    model.set_output_affine(affine[(0, 0)], affine[(0, 1)]);
    if let Some((name, _)) = records.first() {
        return Err(Error::Corrupt(format!("unexpected tensor `{name}`")));
    }
    if flags & FLAG_FITTED != 0 {
        model.mark_fitted();
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Mode};

    fn stats() -> NormStats {
        NormStats {
            mean: vec![0.0],
            std: vec![1.0],
            target_mean: 12.0,
            target_std: 3.0,
        }
    }

    fn fitted(cfg: &ModelConfig, seed: u64) -> Model {
        let mut m = Model::new(cfg, &stats(), &mut Rng::seed(seed)).unwrap();
        m.mark_fitted();
        if let Some(e) = m.encoder_mut() {
            e.freeze();
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let base = ModelConfig { window: 20, ..ModelConfig::default() };
        let mut configs: Vec<ModelConfig> = (1..=6).map(|e| base.ladder(e).unwrap()).collect();
        configs.push(ModelConfig { shared_hash: false, ..base.clone() });
        configs.push(ModelConfig { arch: Arch::NLinear, ..base.clone() });
        configs.push(ModelConfig { arch: Arch::DLinear, ..base.clone() });
        let mut rng = Rng::seed(99);
        for (i, cfg) in configs.iter().enumerate() {
            let m = fitted(cfg, i as u64);
            let bytes = encode_model(&m);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back), bytes);
            for _ in 0..5 {
                let x = Matrix::randn(20, 1, 1.0, &mut rng);
                assert_eq!(
                    m.forward(&x, Mode::Infer).unwrap().prediction.to_bits(),
                    back.forward(&x, Mode::Infer).unwrap().prediction.to_bits()
                );
            }
        }
    }

    #[test]
    fn unfrozen_state_survives() {
        let cfg = ModelConfig { window: 20, ..ModelConfig::default() };
        let m = Model::new(&cfg, &stats(), &mut Rng::seed(1)).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert!(!back.is_fitted());
        assert!(!back.encoder().unwrap().is_frozen());
        assert_eq!(back, m);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let cfg = ModelConfig { window: 20, ..ModelConfig::default() };
        let mut bytes = encode_model(&fitted(&cfg, 2));
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_model(&fitted(&cfg, 2));
        bytes[4] = 9;
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_corrupt() {
        let cfg = ModelConfig { window: 20, ..ModelConfig::default() };
        let bytes = encode_model(&fitted(&cfg, 3));
        for cut in [5, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scare");
        let cfg = ModelConfig { window: 20, ..ModelConfig::default() };
        let m = fitted(&cfg, 4);
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        assert!(matches!(load_model(dir.path().join("missing")), Err(Error::Io(_))));
    }
}

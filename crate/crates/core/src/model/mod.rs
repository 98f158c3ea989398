//! Calibration models: the SCARE network, its ablation variants and two
//! linear baselines, behind one [`Model`] type.
//!
//! Every model maps an `N × D_in` window (z-scored inputs) to a raw scalar
//! that a fixed output affine `y = scale·raw + shift` turns into physical
//! target units. The affine is set from train-split target statistics at
//! construction and is not trained.

mod baselines;
mod io;
mod mha;
mod scare;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use baselines::{dlinear_forward, moving_average, nlinear_forward, DLinear, NLinear};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use mha::{mha_backward, mha_forward, MhaCache};
pub use scare::{embed, ScareNet};

use crate::data::NormStats;
use crate::eba::{Binarizer, CodeGrad, OpCounts};
use crate::error::{Error, Result};
use crate::hash::HashEncoder;
use crate::numerics::{Matrix, Rng};
use crate::slp::num_lenses;

macro_rules! flag_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name).to_ascii_lowercase(),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

flag_enum!(Arch { Scare => "scare", NLinear => "nlinear", DLinear => "dlinear" });
flag_enum!(
    /// `Local` uses only the per-timestep projection; `Dual` adds the
    /// projected window mean to every timestep.
    Embedding { Local => "local", Dual => "dual" }
);
flag_enum!(Patching { None => "none", Slp => "slp" });
flag_enum!(
    /// `Hash` is plain hash attention, whose similarity is the number of
    /// matching bits (scaled by 2) computed query by query; `Eba` uses the
    /// precomputed memory map.
    Attention { Mha => "mha", Hash => "hash", Eba => "eba" }
);
flag_enum!(Sampling { Static => "static", Dynamic => "dynamic" });

/// Architecture and size of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Window length `N`.
    pub window: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub code_bits: usize,
    pub support: usize,
    pub clip: f32,
    pub eps: f32,
    pub embedding: Embedding,
    pub patching: Patching,
    pub attention: Attention,
    pub sampling: Sampling,
    /// Queries and keys hashed with the same projection.
    pub shared_hash: bool,
    /// Heads of the multi-head ablation.
    pub heads: usize,
    pub dlinear_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Scare,
            window: 60,
            input_dim: 1,
            d_model: 8,
            d_ff: 16,
            code_bits: 16,
            support: 8,
            clip: 1.0,
            eps: 1e-6,
            embedding: Embedding::Dual,
            patching: Patching::Slp,
            attention: Attention::Eba,
            sampling: Sampling::Dynamic,
            shared_hash: true,
            heads: 2,
            dlinear_kernel: 25,
        }
    }
}

/// Keys accepted by [`ModelConfig::from_kv`], in serialization order.
pub const MODEL_KEYS: &[&str] = &[
    "arch",
    "window",
    "input_dim",
    "d_model",
    "d_ff",
    "code_bits",
    "support",
    "clip",
    "eps",
    "embedding",
    "patching",
    "attention",
    "sampling",
    "shared_hash",
    "heads",
    "dlinear_kernel",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

impl ModelConfig {
    /// Flags of ablation experiment `exp` (1 to 6) on top of `self`:
    ///
    /// | exp | embedding | patching | attention | sampling |
    /// |-----|-----------|----------|-----------|----------|
    /// | 1   | local     | none     | mha       | static   |
    /// | 2   | local     | slp      | mha       | static   |
    /// | 3   | dual      | slp      | mha       | static   |
    /// | 4   | dual      | slp      | hash      | static   |
    /// | 5   | dual      | slp      | eba       | static   |
    /// | 6   | dual      | slp      | eba       | dynamic  |
    pub fn ladder(&self, exp: usize) -> Result<ModelConfig> {
        use Attention::*;
        let (embedding, patching, attention, sampling) = match exp {
            1 => (Embedding::Local, Patching::None, Mha, Sampling::Static),
            2 => (Embedding::Local, Patching::Slp, Mha, Sampling::Static),
            3 => (Embedding::Dual, Patching::Slp, Mha, Sampling::Static),
            4 => (Embedding::Dual, Patching::Slp, Hash, Sampling::Static),
            5 => (Embedding::Dual, Patching::Slp, Eba, Sampling::Static),
            6 => (Embedding::Dual, Patching::Slp, Eba, Sampling::Dynamic),
            _ => return Err(Error::Config(format!("ablation experiments are numbered 1 to 6, got {exp}"))),
        };
        Ok(ModelConfig {
            arch: Arch::Scare,
            embedding,
            patching,
            attention,
            sampling,
            ..self.clone()
        })
    }

    /// Number of tokens entering attention.
    pub fn tokens(&self) -> usize {
        match self.patching {
            Patching::Slp => num_lenses(self.window).unwrap_or(1),
            Patching::None => self.window,
        }
    }

    pub fn uses_hash(&self) -> bool {
        self.arch == Arch::Scare && self.attention != Attention::Mha
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("code_bits", self.code_bits),
            ("support", self.support),
            ("heads", self.heads),
            ("dlinear_kernel", self.dlinear_kernel),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.window < 2 {
            return Err(Error::Config("`window` must be at least 2".into()));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config("`clip` must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config("`eps` must lie in (0, 1)".into()));
        }
        if self.arch == Arch::Scare && self.attention == Attention::Mha && self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "`heads` ({}) must divide `d_model` ({})",
                self.heads, self.d_model
            )));
        }
        if self.code_bits > 4096 {
            return Err(Error::Config("`code_bits` above 4096 is not supported".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let v = |s: &dyn fmt::Display| s.to_string();
        let values = [
            v(&self.arch),
            v(&self.window),
            v(&self.input_dim),
            v(&self.d_model),
            v(&self.d_ff),
            v(&self.code_bits),
            v(&self.support),
            v(&self.clip),
            v(&self.eps),
            v(&self.embedding),
            v(&self.patching),
            v(&self.attention),
            v(&self.sampling),
            v(&self.shared_hash),
            v(&self.heads),
            v(&self.dlinear_kernel),
        ];
        MODEL_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Applies one `key = value` pair. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = value.parse()?,
            "window" => self.window = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "code_bits" => self.code_bits = parse(key, value)?,
            "support" => self.support = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "embedding" => self.embedding = value.parse()?,
            "patching" => self.patching = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "sampling" => self.sampling = value.parse()?,
            "shared_hash" => self.shared_hash = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "dlinear_kernel" => self.dlinear_kernel = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trainable scalars, in closed form.
    pub fn param_count(&self) -> usize {
        let (n, din, d, dff) = (self.window, self.input_dim, self.d_model, self.d_ff);
        match self.arch {
            Arch::NLinear => n * din + 1,
            Arch::DLinear => 2 * n * din + 1,
            Arch::Scare => {
                let t = self.tokens();
                let mut total = din * d;
                if self.embedding == Embedding::Dual {
                    total += din * d;
                }
                if self.patching == Patching::Slp {
                    total += n * t + t * d;
                }
                total += 3 * d * d;
                if self.uses_hash() {
                    total += self.support * self.code_bits;
                    if !self.shared_hash {
                        total += self.support * self.code_bits;
                    }
                }
                total += d * dff + dff + dff * d + d;
                total + t * d + 1
            }
        }
    }
}

/// Named gradients in the order of [`Model::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    entries: Vec<(&'static str, Matrix)>,
}

impl Gradients {
    pub(crate) fn new(entries: Vec<(&'static str, Matrix)>) -> Self {
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (*n, m))
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.entries.iter().map(|(_, m)| m).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::dim("Gradients::add_assign", "different tensor lists"));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb {
                return Err(Error::dim("Gradients::add_assign", "different tensor lists"));
            }
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for (_, m) in &mut self.entries {
            m.scale(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.iter().map(|(_, m)| m.squared_norm()).sum::<f64>().sqrt()
    }
}

/// Whether a forward pass keeps what the backward pass needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dense float path with the current (possibly dynamic) support;
    /// keeps a cache.
    Train,
    /// Deployment path: bit-packed codes and a frozen support; no cache.
    Infer,
}

#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Scare(Box<scare::ScareCache>),
    Linear(Matrix),
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub prediction: f32,
    pub(crate) cache: Option<Cache>,
}

impl Forward {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Scare(ScareNet),
    NLinear(NLinear),
    DLinear(DLinear),
}

/// A calibration model with its configuration and output affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    net: Net,
    out_scale: f32,
    out_shift: f32,
    fitted: bool,
}

impl Model {
    /// Fresh parameters for `config`; the output affine maps standardized
    /// predictions to the target scale of `stats`.
    pub fn new(config: &ModelConfig, stats: &NormStats, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        if stats.mean.len() != config.input_dim {
            return Err(Error::Config(format!(
                "input_dim = {} but the data has {} feature(s)",
                config.input_dim,
                stats.mean.len()
            )));
        }
        let net = match config.arch {
            Arch::Scare => Net::Scare(ScareNet::init(config, rng)?),
            Arch::NLinear => Net::NLinear(NLinear::init(config.window, config.input_dim)),
            Arch::DLinear => Net::DLinear(DLinear::init(config.window, config.input_dim, config.dlinear_kernel)),
        };
        Ok(Model {
            config: config.clone(),
            net,
            out_scale: stats.target_std,
            out_shift: stats.target_mean,
            fitted: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    pub fn output_affine(&self) -> (f32, f32) {
        (self.out_scale, self.out_shift)
    }

    pub fn set_output_affine(&mut self, scale: f32, shift: f32) {
        self.out_scale = scale;
        self.out_shift = shift;
    }

    /// Set once training has run (or was skipped on purpose).
    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn mark_fitted(&mut self) {
        self.fitted = true;
    }

    pub fn encoder(&self) -> Option<&HashEncoder> {
        match &self.net {
            Net::Scare(s) => s.hash.as_ref(),
            _ => None,
        }
    }

    pub fn encoder_mut(&mut self) -> Option<&mut HashEncoder> {
        match &mut self.net {
            Net::Scare(s) => s.hash.as_mut(),
            _ => None,
        }
    }

    /// Replaces the hash encoder wholesale (e.g. with a frozen one).
    pub fn set_encoder(&mut self, encoder: HashEncoder) -> Result<()> {
        match self.encoder_mut() {
            Some(e) => {
                if e.support().shape() != encoder.support().shape() || e.proj.shape() != encoder.proj.shape() {
                    return Err(Error::dim("set_encoder", "encoder shape differs from the model's"));
                }
                *e = encoder;
                Ok(())
            }
            None => Err(Error::State("model has no hash encoder".into())),
        }
    }

    /// Post-patching token rows of `x`, the pool support rows come from.
    pub fn lens_representation(&self, x: &Matrix) -> Result<Matrix> {
        match &self.net {
            Net::Scare(s) => s.lens(x),
            _ => Err(Error::State("only the SCARE network has lens rows".into())),
        }
    }

    /// Chooses the code function and gradient rule of the training path.
    pub fn set_code_path(&mut self, binarizer: Binarizer, code_grad: CodeGrad) {
        if let Net::Scare(s) = &mut self.net {
            s.binarizer = binarizer;
            s.code_grad = code_grad;
        }
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<Forward> {
        if x.shape() != (self.config.window, self.config.input_dim) {
            return Err(Error::dim(
                "Model::forward",
                format!(
                    "input {}x{} vs window {}x{}",
                    x.rows(),
                    x.cols(),
                    self.config.window,
                    self.config.input_dim
                ),
            ));
        }
        let keep = mode == Mode::Train;
        let (raw, cache) = match &self.net {
            Net::Scare(s) => {
                let (raw, cache) = s.forward(x, mode)?;
                (raw, cache.map(|c| Cache::Scare(Box::new(c))))
            }
            Net::NLinear(n) => (n.forward(x)?, keep.then(|| Cache::Linear(x.clone()))),
            Net::DLinear(d) => (d.forward(x)?, keep.then(|| Cache::Linear(x.clone()))),
        };
        let prediction = sanitize(self.out_scale * raw + self.out_shift);
        Ok(Forward { prediction, cache })
    }

    /// Inference-mode prediction.
    pub fn predict(&self, x: &Matrix) -> Result<f32> {
        Ok(self.forward(x, Mode::Infer)?.prediction)
    }

    /// Gradients of `dloss · prediction` with respect to every trainable
    /// tensor.
    pub fn backward(&self, forward: &Forward, dloss: f32) -> Result<Gradients> {
        let cache = forward
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward needs a train-mode forward".into()))?;
        let draw = dloss * self.out_scale;
        match (&self.net, cache) {
            (Net::Scare(s), Cache::Scare(c)) => s.backward(c, draw),
            (Net::NLinear(n), Cache::Linear(x)) => n.backward(x, draw),
            (Net::DLinear(d), Cache::Linear(x)) => d.backward(x, draw),
            _ => Err(Error::State("cache belongs to a different architecture".into())),
        }
    }

    /// Trainable tensors with their names.
    pub fn trainable(&self) -> Vec<(&'static str, &Matrix)> {
        match &self.net {
            Net::Scare(s) => s.trainable(),
            Net::NLinear(n) => n.trainable(),
            Net::DLinear(d) => d.trainable(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.net {
            Net::Scare(s) => s.trainable_mut(),
            Net::NLinear(n) => n.trainable_mut(),
            Net::DLinear(d) => d.trainable_mut(),
        }
    }

    /// Operation counts of the attention stage for one inference on `x`.
    pub fn attention_op_counts(&self, x: &Matrix) -> Result<OpCounts> {
        match &self.net {
            Net::Scare(s) => s.attention_op_counts(x),
            _ => Ok(OpCounts::default()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        load_model(path)
    }
}

/// Predictions are kept finite: overflow saturates at `±f32::MAX` and a NaN
/// (only reachable from non-finite inputs) becomes 0.
fn sanitize(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(f32::MIN, f32::MAX)
    }
}

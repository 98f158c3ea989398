//! Flat `key = value` run settings.
//!
//! Every key has a default; a file or override naming any other key is an
//! error. Blank lines and lines starting with `#` are skipped.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::BenchOptions;
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Window stride when slicing series into samples.
    pub stride: usize,
    /// Feature columns read from CSV input; the first is the raw signal.
    pub features: Vec<String>,
    pub bench: BenchOptions,
    /// Window lengths swept by the scaling benchmark.
    pub bench_windows: Vec<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            stride: 1,
            features: vec![crate::data::SYNTH_FEATURE.to_string()],
            bench: BenchOptions::default(),
            bench_windows: vec![15, 60, 360, 720, 1440],
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &["epochs", "batch_size", "lr", "seed", "resample_every", "grad_clip"];

pub const OTHER_KEYS: &[&str] = &[
    "stride",
    "features",
    "synth.length",
    "synth.sensors",
    "synth.gain",
    "synth.quadratic",
    "synth.noise_std",
    "synth.noise_lag",
    "synth.spike_rate",
    "synth.sensor_spread",
    "synth.period",
    "synth.start_epoch",
    "synth.step_seconds",
    "bench.reps",
    "bench.warmup",
    "bench.trials",
    "bench.windows",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Every key known to [`Settings::set`], in dump order.
    pub fn keys() -> Vec<&'static str> {
        MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(OTHER_KEYS).copied().collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let s = &mut self.synth;
        match key {
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "resample_every" => self.train.resample_every = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "features" => self.features = parse_list(key, value)?,
            "synth.length" => s.length = parse(key, value)?,
            "synth.sensors" => s.sensors = parse(key, value)?,
            "synth.gain" => s.gain = parse(key, value)?,
            "synth.quadratic" => s.quadratic = parse(key, value)?,
            "synth.noise_std" => s.noise_std = parse(key, value)?,
            "synth.noise_lag" => s.noise_lag = parse(key, value)?,
            "synth.spike_rate" => s.spike_rate = parse(key, value)?,
            "synth.sensor_spread" => s.sensor_spread = parse(key, value)?,
            "synth.period" => s.period = parse(key, value)?,
            "synth.start_epoch" => s.start_epoch = parse(key, value)?,
            "synth.step_seconds" => s.step_seconds = parse(key, value)?,
            "bench.reps" => self.bench.reps = parse(key, value)?,
            "bench.warmup" => self.bench.warmup = parse(key, value)?,
            "bench.trials" => self.bench.trials = parse(key, value)?,
            "bench.windows" => self.bench_windows = parse_list(key, value)?,
            _ if MODEL_KEYS.contains(&key) => self.model.set(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies the lines of a settings file on top of `self`. A key may
    /// appear once per file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", no + 1)));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Settings> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Settings::default();
        s.apply_text(&text)?;
        Ok(s)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.stride == 0 {
            return Err(Error::Config("`stride` must be positive".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Config("`features` must name at least one column".into()));
        }
        if self.features.len() != self.model.input_dim {
            return Err(Error::Config(format!(
                "{} feature column(s) but `input_dim` is {}",
                self.features.len(),
                self.model.input_dim
            )));
        }
        if self.bench.reps == 0 || self.bench.trials == 0 {
            return Err(Error::Config("`bench.reps` and `bench.trials` must be positive".into()));
        }
        if self.bench_windows.iter().any(|&w| w < 2) {
            return Err(Error::Config("`bench.windows` entries must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_kv();
        let t = &self.train;
        let s = &self.synth;
        let rest = [
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.seed.to_string(),
            t.resample_every.to_string(),
            t.grad_clip.to_string(),
            self.stride.to_string(),
            self.features.join(","),
            s.length.to_string(),
            s.sensors.to_string(),
            s.gain.to_string(),
            s.quadratic.to_string(),
            s.noise_std.to_string(),
            s.noise_lag.to_string(),
            s.spike_rate.to_string(),
            s.sensor_spread.to_string(),
            s.period.to_string(),
            s.start_epoch.to_string(),
            s.step_seconds.to_string(),
            self.bench.reps.to_string(),
            self.bench.warmup.to_string(),
            self.bench.trials.to_string(),
            join(&self.bench_windows),
        ];
        let keys = TRAIN_KEYS.iter().chain(OTHER_KEYS);
        out.extend(keys.map(|k| k.to_string()).zip(rest));
        out
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn render(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

//! Multi-sensor time series: CSV ingest, per-sensor splits, windowing,
//! normalization and a synthetic distortion generator.
//!
//! CSV layout: a header row with `timestamp`, `sensor_id`, one column per
//! input feature and `reference`. A `region` column is optional; sensors are
//! split within each `(region, feature set)` group. Timestamps are either
//! integer epoch seconds or ISO-8601 (`2024-01-01T00:00:00Z`,
//! `2024-01-01T00:00:00`, `2024-01-01 00:00:00`).

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// One sensor's low-cost readings and co-located reference values.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSeries {
    pub sensor_id: String,
    pub region: String,
    pub features: Vec<String>,
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    /// `T × D_in` low-cost readings.
    pub values: Matrix,
    /// `T` reference readings.
    pub reference: Vec<f32>,
}

impl SensorSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Key of the group this sensor is split within.
    pub fn group_key(&self) -> String {
        format!("{}/{}", self.region, self.features.join(","))
    }

    fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        if self.values.rows() != t || self.reference.len() != t {
            return Err(Error::dim(
                "SensorSeries",
                format!(
                    "{} timestamps, {} value rows, {} reference values",
                    t,
                    self.values.rows(),
                    self.reference.len()
                ),
            ));
        }
        if self.values.cols() != self.features.len() {
            return Err(Error::dim("SensorSeries", "feature count mismatch"));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!(
                "timestamps of `{}` are not strictly increasing",
                self.sensor_id
            )));
        }
        Ok(())
    }
}

/// Output of [`load_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCsv {
    /// One series per `(region, sensor_id)`, in order of first appearance.
    pub series: Vec<SensorSeries>,
    /// Rows dropped for missing or unparseable fields, or duplicate timestamps.
    pub dropped: usize,
}

/// Reads a sensor CSV keeping the named feature columns.
pub fn load_csv(path: impl AsRef<Path>, features: &[&str]) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let require = |name: &str| {
        column(name).ok_or_else(|| {
            Error::Schema(format!("{}: missing column `{name}`", path.display()))
        })
    };
    let ts_col = require("timestamp")?;
    let id_col = require("sensor_id")?;
    let ref_col = require("reference")?;
    let region_col = column("region");
    let feature_cols = features
        .iter()
        .map(|f| require(f))
        .collect::<Result<Vec<_>>>()?;

    struct Rows {
        region: String,
        id: String,
        rows: Vec<(i64, Vec<f32>, f32)>,
    }
    let mut groups: Vec<Rows> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut dropped = 0usize;

    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let field = |i: usize| record.get(i).filter(|s| !s.is_empty());
        let parsed = (|| {
            let ts = parse_timestamp(field(ts_col)?)?;
            let id = field(id_col)?.to_string();
            let region = match region_col {
                Some(c) => record.get(c).unwrap_or("").to_string(),
                None => String::new(),
            };
            let mut vals = Vec::with_capacity(feature_cols.len());
            for &c in &feature_cols {
                vals.push(parse_real(field(c)?)?);
            }
            let r = parse_real(field(ref_col)?)?;
            Some((region, id, ts, vals, r))
        })();
        let Some((region, id, ts, vals, r)) = parsed else {
            dropped += 1;
            continue;
        };
        let slot = *index.entry((region.clone(), id.clone())).or_insert_with(|| {
            groups.push(Rows {
                region,
                id,
                rows: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].rows.push((ts, vals, r));
    }

    let mut series = Vec::with_capacity(groups.len());
    for mut g in groups {
        g.rows.sort_by_key(|row| row.0);
        let before = g.rows.len();
        g.rows.dedup_by_key(|row| row.0);
        dropped += before - g.rows.len();
        let t = g.rows.len();
        let mut values = Vec::with_capacity(t * features.len());
        let mut timestamps = Vec::with_capacity(t);
        let mut reference = Vec::with_capacity(t);
        for (ts, vals, r) in g.rows {
            timestamps.push(ts);
            values.extend(vals);
            reference.push(r);
        }
        series.push(SensorSeries {
            sensor_id: g.id,
            region: g.region,
            features: features.iter().map(|s| s.to_string()).collect(),
            timestamps,
            values: Matrix::from_vec(t, features.len(), values)?,
            reference,
        });
    }
    if series.is_empty() {
        return Err(Error::EmptyData(path.display().to_string()));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} row(s)", path.display());
    }
    Ok(LoadedCsv { series, dropped })
}

fn parse_real(s: &str) -> Option<f32> {
    let v: f32 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Writes series in the layout [`load_csv`] reads, timestamps as epoch
/// seconds. Values use the shortest representation that parses back to the
/// same `f32`.
pub fn write_csv(path: impl AsRef<Path>, series: &[SensorSeries]) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(Error::EmptyData("no series to write".into()));
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp", "sensor_id", "region"];
    header.extend(first.features.iter().map(String::as_str));
    header.push("reference");
    w.write_record(&header)?;
    for s in series {
        s.validate()?;
        if s.features != first.features {
            return Err(Error::Schema("series disagree on feature columns".into()));
        }
        for t in 0..s.len() {
            let mut row = vec![
                s.timestamps[t].to_string(),
                s.sensor_id.clone(),
                s.region.clone(),
            ];
            row.extend(s.values.row(t).iter().map(|v| v.to_string()));
            row.push(s.reference[t].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sensors assigned to each split.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSplit {
    pub train: Vec<SensorSeries>,
    pub val: Vec<SensorSeries>,
    pub test: Vec<SensorSeries>,
}

/// Within each `(region, feature set)` group, sorts sensors by id and assigns
/// the last to test, the second-to-last to validation and the rest to train.
pub fn split_by_sensor(series: Vec<SensorSeries>) -> Result<SensorSplit> {
    let mut groups: BTreeMap<String, Vec<SensorSeries>> = BTreeMap::new();
    for s in series {
        s.validate()?;
        groups.entry(s.group_key()).or_default().push(s);
    }
    let mut split = SensorSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (group, mut members) in groups {
        if members.len() < 3 {
            return Err(Error::InsufficientSensors {
                group,
                found: members.len(),
            });
        }
        members.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
        if members.windows(2).any(|w| w[0].sensor_id == w[1].sensor_id) {
            return Err(Error::Schema(format!("duplicate sensor id in group `{group}`")));
        }
        let test = members.pop().expect("at least three members");
        let val = members.pop().expect("at least two members");
        split.test.push(test);
        split.val.push(val);
        split.train.extend(members);
    }
    Ok(split)
}

/// One calibration example: a window of low-cost readings and the reference
/// value at the window's final timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSample {
    /// `N × D_in` readings, oldest first.
    pub x: Matrix,
    pub target: f32,
    /// Timestamp of the last row of `x`.
    pub timestamp: i64,
    pub sensor_id: String,
    /// Raw (unnormalized) first feature at the final timestep.
    pub raw_last: f32,
}

/// Slides a window of `window` rows with step `stride`; the target of the
/// window ending at `t` is `reference[t]`. Produces `⌊(T − N)/stride⌋ + 1`
/// samples.
pub fn make_windows(series: &SensorSeries, window: usize, stride: usize) -> Result<Vec<CalibSample>> {
    if window < 2 || stride < 1 {
        return Err(Error::Domain(format!(
            "window must be >= 2 and stride >= 1 (got {window}, {stride})"
        )));
    }
    let t_len = series.len();
    if t_len < window {
        return Err(Error::TooShort {
            sensor: series.sensor_id.clone(),
            len: t_len,
            window,
        });
    }
    let d = series.values.cols();
    let count = (t_len - window) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let end = window - 1 + k * stride;
        let start = end + 1 - window;
        let data = series.values.as_slice()[start * d..(end + 1) * d].to_vec();
        out.push(CalibSample {
            x: Matrix::from_vec(window, d, data)?,
            target: series.reference[end],
            timestamp: series.timestamps[end],
            sensor_id: series.sensor_id.clone(),
            raw_last: series.values[(end, 0)],
        });
    }
    Ok(out)
}

/// Train-split statistics. Inputs are z-scored per feature; the target
/// statistics only seed the models' output scaling, samples keep physical
/// target units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub target_mean: f32,
    pub target_std: f32,
}

pub fn fit_normalizer(train: &[CalibSample]) -> Result<NormStats> {
    let Some(first) = train.first() else {
        return Err(Error::Domain("cannot fit a normalizer on an empty split".into()));
    };
    let d = first.x.cols();
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for s in train {
        if s.x.cols() != d {
            return Err(Error::dim("fit_normalizer", "inconsistent feature count"));
        }
        for r in 0..s.x.rows() {
            for (j, &v) in s.x.row(r).iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        n += s.x.rows();
    }
    let mut mean = Vec::with_capacity(d);
    let mut std = Vec::with_capacity(d);
    for j in 0..d {
        let m = sum[j] / n as f64;
        let var = (sq[j] / n as f64 - m * m).max(0.0);
        let sd = var.sqrt();
        mean.push(m as f32);
        if sd < 1e-12 {
            log::warn!("feature {j} has zero variance on the train split; using std = 1");
            std.push(1.0);
        } else {
            std.push(sd as f32);
        }
    }
    let tn = train.len() as f64;
    let tm = train.iter().map(|s| s.target as f64).sum::<f64>() / tn;
    let tv = train
        .iter()
        .map(|s| (s.target as f64 - tm).powi(2))
        .sum::<f64>()
        / tn;
    let target_std = if tv.sqrt() < 1e-12 { 1.0 } else { tv.sqrt() as f32 };
    Ok(NormStats {
        mean,
        std,
        target_mean: tm as f32,
        target_std,
    })
}

/// Z-scores every window with `stats`; targets are left untouched.
pub fn apply_normalizer(stats: &NormStats, samples: &[CalibSample]) -> Result<Vec<CalibSample>> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.x = normalize(stats, &s.x)?;
            Ok(out)
        })
        .collect()
}

pub fn normalize(stats: &NormStats, x: &Matrix) -> Result<Matrix> {
    if x.cols() != stats.mean.len() {
        return Err(Error::dim("normalize", "feature count differs from statistics"));
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        (x[(r, c)] - stats.mean[c]) / stats.std[c]
    }))
}

pub fn denormalize(stats: &NormStats, x: &Matrix) -> Result<Matrix> {
    if x.cols() != stats.mean.len() {
        return Err(Error::dim("denormalize", "feature count differs from statistics"));
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        x[(r, c)] * stats.std[c] + stats.mean[c]
    }))
}

/// Windowed, normalized train/val/test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CalibSample>,
    pub val: Vec<CalibSample>,
    pub test: Vec<CalibSample>,
    pub stats: NormStats,
}

/// Splits by sensor, windows every series and normalizes with train-only
/// statistics.
pub fn build_dataset(series: Vec<SensorSeries>, window: usize, stride: usize) -> Result<DatasetSplit> {
    let split = split_by_sensor(series)?;
    let windows = |list: &[SensorSeries]| -> Result<Vec<CalibSample>> {
        let mut out = Vec::new();
        for s in list {
            out.extend(make_windows(s, window, stride)?);
        }
        Ok(out)
    };
    let train = windows(&split.train)?;
    let val = windows(&split.val)?;
    let test = windows(&split.test)?;
    let stats = fit_normalizer(&train)?;
    Ok(DatasetSplit {
        train: apply_normalizer(&stats, &train)?,
        val: apply_normalizer(&stats, &val)?,
        test: apply_normalizer(&stats, &test)?,
        stats,
    })
}

/// Parameters of the synthetic generator.
///
/// Each sensor gets its own reference `r(t)`: a level of 25 plus a slow
/// AR(1) trend, a sinusoid of period `period` and occasional decaying
/// spikes, floored at 1. The low-cost reading is
/// `x(t) = a·r(t) + b·r(t)² + n(t)` with AR(1) noise
/// `n(t) = ρ·n(t−1) + σ_n·√(1−ρ²)·e(t)`. `a` and `b` are scaled per sensor by
/// a uniform factor in `[1 − spread, 1 + spread]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub length: usize,
    pub sensors: usize,
    pub gain: f32,
    pub quadratic: f32,
    pub noise_std: f32,
    /// AR(1) coefficient ρ of the noise.
    pub noise_lag: f32,
    /// Per-step spike probability.
    pub spike_rate: f32,
    pub sensor_spread: f32,
    pub period: usize,
    pub start_epoch: i64,
    pub step_seconds: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            length: 5000,
            sensors: 3,
            gain: 1.0,
            quadratic: 0.02,
            noise_std: 1.0,
            noise_lag: 0.8,
            spike_rate: 0.01,
            sensor_spread: 0.05,
            period: 144,
            start_epoch: 1_600_000_000,
            step_seconds: 600,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic data: {msg}")));
        if self.length < 2 {
            return bad("length must be >= 2");
        }
        if self.sensors < 3 {
            return bad("at least 3 sensors are required");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.noise_lag) {
            return bad("noise_lag must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return bad("spike_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.sensor_spread) {
            return bad("sensor_spread must lie in [0, 1)");
        }
        if !self.gain.is_finite() || !self.quadratic.is_finite() {
            return bad("gain and quadratic must be finite");
        }
        if self.period == 0 || self.step_seconds <= 0 {
            return bad("period and step_seconds must be positive");
        }
        Ok(())
    }
}

/// Name of the single low-cost feature column in generated data.
pub const SYNTH_FEATURE: &str = "lowcost";

/// Generates `cfg.sensors` series named `s01`, `s02`, … in region `synth`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SensorSeries>> {
    cfg.validate()?;
    let root = Rng::seed(seed);
    let mut out = Vec::with_capacity(cfg.sensors);
    for s in 0..cfg.sensors {
        // Reference and noise draw from separate streams so changing the
        // noise level leaves r(t) unchanged.
        let mut ref_rng = root.fork(2 * s as u64 + 1);
        let mut noise_rng = root.fork(2 * s as u64 + 2);
        let spread = |rng: &mut Rng| 1.0 + cfg.sensor_spread * (2.0 * rng.uniform() - 1.0);
        let a = cfg.gain * spread(&mut ref_rng);
        let b = cfg.quadratic * spread(&mut ref_rng);
        let phase = ref_rng.uniform() * std::f32::consts::TAU;

        let trend_rho = 0.999f32;
        let trend_std = 8.0f32;
        let mut trend = trend_std * ref_rng.normal();
        let mut spike = 0.0f32;
        let mut noise = cfg.noise_std * noise_rng.normal();
        let noise_innov = cfg.noise_std * (1.0 - cfg.noise_lag * cfg.noise_lag).sqrt();

        let mut timestamps = Vec::with_capacity(cfg.length);
        let mut values = Vec::with_capacity(cfg.length);
        let mut reference = Vec::with_capacity(cfg.length);
        for t in 0..cfg.length {
            if t > 0 {
                trend = trend_rho * trend
                    + trend_std * (1.0 - trend_rho * trend_rho).sqrt() * ref_rng.normal();
                noise = cfg.noise_lag * noise + noise_innov * noise_rng.normal();
            }
            spike *= 0.85;
            let jump = ref_rng.uniform();
            let amplitude = 20.0 + 20.0 * ref_rng.uniform();
            if jump < cfg.spike_rate {
                spike += amplitude;
            }
            let season = 10.0
                * (std::f32::consts::TAU * t as f32 / cfg.period as f32 + phase).sin();
            let r = (25.0 + trend + season + spike).max(1.0);
            let x = a * r + b * r * r + noise;
            timestamps.push(cfg.start_epoch + t as i64 * cfg.step_seconds);
            values.push(x);
            reference.push(r);
        }
        out.push(SensorSeries {
            sensor_id: format!("s{:02}", s + 1),
            region: "synth".into(),
            features: vec![SYNTH_FEATURE.into()],
            timestamps,
            values: Matrix::from_vec(cfg.length, 1, values)?,
            reference,
        });
    }
    Ok(out)
}

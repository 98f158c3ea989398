//! Accuracy metrics, latency harness, activation-memory estimate and the
//! comparison tables written as CSV.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use crate::data::{CalibSample, DatasetSplit, NormStats};
use crate::eba::OpCounts;
use crate::error::{Error, Result};
use crate::hash::freeze_support;
use crate::model::{Arch, Attention, Embedding, Model, ModelConfig, Patching};
use crate::numerics::{Matrix, Rng};
use crate::train::{fit, TrainConfig};

pub fn rmse(preds: &[f32], targets: &[f32]) -> Result<f32> {
    if preds.is_empty() {
        return Err(Error::Domain("rmse of an empty series".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::dim("rmse", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((sum / preds.len() as f64).sqrt() as f32)
}

/// Indices of the largest `|raw[i] − raw[i−1]|`, ties going to the earlier
/// index. Index 0 has no predecessor and is never chosen. `⌈0.05·n⌉`
/// indices are kept, at least one and at most `n − 1`.
pub fn top5_indices(raw: &[f32]) -> Result<Vec<usize>> {
    let n = raw.len();
    if n < 2 {
        return Err(Error::Domain("top-5% selection needs at least two points".into()));
    }
    if n < 20 {
        log::warn!("top-5% selection over only {n} points keeps a single index");
    }
    let k = n.div_ceil(20).clamp(1, n - 1);
    let mut idx: Vec<usize> = (1..n).collect();
    let jump = |i: usize| (raw[i] - raw[i - 1]).abs();
    idx.sort_by(|&a, &b| jump(b).total_cmp(&jump(a)).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// RMSE on the points where the raw input moves the most.
pub fn top5_rmse(preds: &[f32], targets: &[f32], raw: &[f32]) -> Result<f32> {
    if preds.len() != targets.len() || preds.len() != raw.len() {
        return Err(Error::dim(
            "top5_rmse",
            format!("{} predictions, {} targets, {} raw points", preds.len(), targets.len(), raw.len()),
        ));
    }
    let idx = top5_indices(raw)?;
    let p: Vec<f32> = idx.iter().map(|&i| preds[i]).collect();
    let t: Vec<f32> = idx.iter().map(|&i| targets[i]).collect();
    rmse(&p, &t)
}

/// Top-5% RMSE over several series: the mean of per-series values and the
/// RMSE of all selected points pooled together.
pub fn top5_rmse_groups(groups: &[(&[f32], &[f32], &[f32])]) -> Result<(f32, f32)> {
    if groups.is_empty() {
        return Err(Error::Domain("no series to score".into()));
    }
    let mut mean = 0.0f64;
    let (mut pp, mut pt) = (Vec::new(), Vec::new());
    for &(p, t, r) in groups {
        mean += top5_rmse(p, t, r)? as f64;
        for i in top5_indices(r)? {
            pp.push(p[i]);
            pt.push(t[i]);
        }
    }
    Ok(((mean / groups.len() as f64) as f32, rmse(&pp, &pt)?))
}

/// Inference on every sample, in order.
pub fn predict_all(model: &Model, samples: &[CalibSample]) -> Result<Vec<f32>> {
    samples.iter().map(|s| model.predict(&s.x)).collect()
}

/// Consecutive runs of samples from the same sensor.
fn sensor_runs(samples: &[CalibSample]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].sensor_id != samples[start].sensor_id {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    /// Per-run wall-clock times in milliseconds.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
    /// Sample standard deviation of `samples_ms`.
    pub jitter_ms: f64,
    pub warning: Option<String>,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, warning: Option<String>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Domain("no timings recorded".into()));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(LatencyStats {
            mean_ms: mean,
            max_ms: samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            jitter_ms: var.sqrt(),
            samples_ms,
            warning,
        })
    }
}

/// Smallest nonzero step of the monotonic clock seen over a short probe.
pub fn timer_resolution() -> std::time::Duration {
    let mut best = std::time::Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times `reps` calls of `f` after `warmup` untimed ones, on the calling
/// thread.
pub fn latency_bench(mut f: impl FnMut() -> Result<()>, reps: usize, warmup: usize) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::Domain("latency_bench needs at least one timed run".into()));
    }
    let res = timer_resolution();
    let warning = (res > std::time::Duration::from_micros(1))
        .then(|| format!("timer resolution {res:?} is coarser than 1 µs"));
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(samples, warning)
}

/// Latency of single-window inference with `model`.
pub fn model_latency(model: &Model, x: &Matrix, reps: usize, warmup: usize) -> Result<LatencyStats> {
    if !model.is_fitted() {
        return Err(Error::State("latency is measured on fitted models".into()));
    }
    latency_bench(
        || {
            black_box(model.predict(black_box(x))?);
            Ok(())
        },
        reps,
        warmup,
    )
}

/// Largest number of activation elements alive at once during inference.
///
/// The pipeline is walked stage by stage; each stage keeps its inputs, its
/// outputs and any scratch it needs, and everything else is released. With
/// `T` tokens, `w = ⌈c/32⌉` code words per token and all counts in elements:
///
/// | stage     | live tensors                                        |
/// |-----------|-----------------------------------------------------|
/// | embed     | `X` (N·D_in), `E` (N·D), global row (D, dual only)    |
/// | compress  | `E` (N·D), `Z` (T·D), SLP only                        |
/// | project   | `Z`, `Q`, `K`, `V` (4·T·D)                            |
/// | hash      | `Z`, `Q`, `K`, `V`, `κ` (m), pre-sign (c), codes (2·T·w) |
/// | attend    | EBA: `Z`, `V`, codes, `M` (c·D), `k̄` (c), out (T·D)    |
/// |           | HA: `Z`, `V`, codes, accumulator (D), out (T·D)       |
/// |           | MHA: `Z`, `Q`, `K`, `V`, scores (h·T²), out (T·D)      |
/// | ffn       | `H1` (T·D), hidden (T·D_ff), `F` (T·D)                 |
/// | head      | `H2` (T·D), output (1)                                |
///
/// NLinear keeps `X`, `X − x_last` and the output; DLinear keeps `X`, trend,
/// seasonal part and the output.
pub fn peak_activation_elements(cfg: &ModelConfig) -> usize {
    let (n, din, d, dff) = (cfg.window, cfg.input_dim, cfg.d_model, cfg.d_ff);
    match cfg.arch {
        Arch::NLinear => 2 * n * din + 1,
        Arch::DLinear => 3 * n * din + 1,
        Arch::Scare => {
            let t = cfg.tokens();
            let td = t * d;
            let dual = if cfg.embedding == Embedding::Dual { d } else { 0 };
            let mut stages = vec![n * din + n * d + dual, 4 * td, td + t * dff + td, td + 1];
            if cfg.patching == Patching::Slp {
                stages.push(n * d + td);
            }
            let (c, m) = (cfg.code_bits, cfg.support);
            let codes = 2 * t * c.div_ceil(32);
            match cfg.attention {
                Attention::Mha => stages.push(4 * td + cfg.heads * t * t + td),
                Attention::Eba => {
                    stages.push(4 * td + m + c + codes);
                    stages.push(2 * td + codes + c * d + c + td);
                }
                Attention::Hash => {
                    stages.push(4 * td + m + c + codes);
                    stages.push(2 * td + codes + d + td);
                }
            }
            stages.into_iter().max().unwrap_or(0)
        }
    }
}

/// [`peak_activation_elements`] at 4 bytes per element, in KiB.
pub fn peak_activation(cfg: &ModelConfig) -> f64 {
    peak_activation_elements(cfg) as f64 * 4.0 / 1024.0
}

/// Closed-form arithmetic of one inference outside the attention stage.
///
/// A multiply-accumulate counts as one `mul` and one `add`; subtractions
/// count as additions. Hash encoding is included here since its operands are
/// real-valued.
pub fn dense_op_counts(cfg: &ModelConfig) -> OpCounts {
    fn mac(ops: &mut OpCounts, k: u64) {
        ops.mul += k;
        ops.add += k;
    }
    let (n, din, d, dff) = (cfg.window as u64, cfg.input_dim as u64, cfg.d_model as u64, cfg.d_ff as u64);
    let mut ops = OpCounts::default();
    match cfg.arch {
        Arch::NLinear => {
            mac(&mut ops, n * din);
            ops.add += n * din + 2;
        }
        Arch::DLinear => {
            let k = cfg.dlinear_kernel.clamp(1, cfg.window) as u64;
            ops.add += n * din * k + n * din + 1;
            ops.mul += n * din;
            mac(&mut ops, 2 * n * din);
        }
        Arch::Scare => {
            let t = cfg.tokens() as u64;
            mac(&mut ops, n * din * d);
            if cfg.embedding == Embedding::Dual {
                ops.add += n * din + n * d;
                ops.div += din;
                mac(&mut ops, din * d);
            }
            if cfg.patching == Patching::Slp {
                mac(&mut ops, t * n * d);
                ops.add += t * d;
            }
            mac(&mut ops, 3 * t * d * d);
            if cfg.uses_hash() {
                // Per hashed token (2T of them): squared distances to the m
                // support rows, scaling and exp, centering, projection.
                let (m, c) = (cfg.support as u64, cfg.code_bits as u64);
                mac(&mut ops, 2 * t * (m * d + m * c));
                ops.add += 2 * t * (m * d + m);
                ops.mul += 2 * t * m;
                ops.exp += 2 * t * m;
            }
            ops.add += 2 * t * d;
            mac(&mut ops, 2 * t * d * dff);
            ops.add += t * dff + t * d;
            mac(&mut ops, t * d);
            ops.add += 1;
        }
    }
    // Output affine.
    mac(&mut ops, 1);
    ops
}

/// One row of the requirement table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub val_rmse: Option<f32>,
    pub rmse: f32,
    /// Mean of per-series top-5% RMSE.
    pub top5_rmse: f32,
    /// Top-5% RMSE over the pooled selections.
    pub top5_rmse_pooled: f32,
    pub latency: LatencyStats,
    pub peak_activation_kb: f64,
    pub param_count: usize,
    pub mul_count: u64,
    pub add_count: u64,
    /// Real multiplications with a hash-code operand in attention.
    pub attn_code_mul: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Independent timing trials; the one with the lowest mean is kept.
    pub trials: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 50,
            warmup: 5,
            trials: 3,
        }
    }
}

fn best_latency(model: &Model, x: &Matrix, opts: &BenchOptions) -> Result<LatencyStats> {
    let mut best: Option<LatencyStats> = None;
    for _ in 0..opts.trials.max(1) {
        let s = model_latency(model, x, opts.reps, opts.warmup)?;
        if best.as_ref().is_none_or(|b| s.mean_ms < b.mean_ms) {
            best = Some(s);
        }
    }
    Ok(best.expect("at least one trial"))
}

/// Scores a fitted model on `samples`. Top-5% selection runs per sensor on
/// the raw input at each window's last step.
pub fn evaluate(model: &Model, name: &str, samples: &[CalibSample], opts: &BenchOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyData("nothing to evaluate".into()));
    }
    let preds = predict_all(model, samples)?;
    let targets: Vec<f32> = samples.iter().map(|s| s.target).collect();
    let raw: Vec<f32> = samples.iter().map(|s| s.raw_last).collect();
    let runs: Vec<_> = sensor_runs(samples).into_iter().filter(|r| r.len() >= 2).collect();
    let groups: Vec<(&[f32], &[f32], &[f32])> = runs
        .iter()
        .map(|r| (&preds[r.clone()], &targets[r.clone()], &raw[r.clone()]))
        .collect();
    let (top5, pooled) = top5_rmse_groups(&groups)?;
    let latency = best_latency(model, &samples[0].x, opts)?;
    let cfg = model.config();
    let attn = model.attention_op_counts(&samples[0].x)?;
    let dense = dense_op_counts(cfg);
    Ok(MetricsReport {
        model: name.to_string(),
        val_rmse: None,
        rmse: rmse(&preds, &targets)?,
        top5_rmse: top5,
        top5_rmse_pooled: pooled,
        latency,
        peak_activation_kb: peak_activation(cfg),
        param_count: cfg.param_count(),
        mul_count: dense.mul + attn.mul + attn.code_mul,
        add_count: dense.add + attn.add,
        attn_code_mul: attn.code_mul,
    })
}

/// Trains every named configuration on `dataset` and scores it on the test
/// split.
pub fn compare_models(
    dataset: &DatasetSplit,
    configs: &[(String, ModelConfig)],
    tcfg: &TrainConfig,
    opts: &BenchOptions,
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let (model, history) = fit(dataset, cfg, tcfg)?;
        let mut report = evaluate(&model, name, &dataset.test, opts)?;
        report.val_rmse = history
            .epochs
            .iter()
            .find(|e| e.epoch == history.best_epoch)
            .map(|e| e.val_rmse);
        out.push(report);
    }
    Ok(out)
}

/// The six ablation configurations on top of `base`, named `exp1`..`exp6`.
pub fn ablation_configs(base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
    (1..=6).map(|e| Ok((format!("exp{e}"), base.ladder(e)?))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub window: usize,
    pub tokens: usize,
    pub latency: LatencyStats,
    pub peak_activation_kb: f64,
    pub param_count: usize,
}

/// Latency and memory of untrained `base` models over several window
/// lengths. Weights are random; timing does not depend on their values.
pub fn scaling_bench(base: &ModelConfig, windows: &[usize], opts: &BenchOptions, seed: u64) -> Result<Vec<ScalingRow>> {
    let root = Rng::seed(seed);
    let mut rows = Vec::with_capacity(windows.len());
    for (i, &n) in windows.iter().enumerate() {
        let cfg = ModelConfig {
            window: n,
            ..base.clone()
        };
        let mut rng = root.fork(i as u64);
        let stats = NormStats {
            mean: vec![0.0; cfg.input_dim],
            std: vec![1.0; cfg.input_dim],
            target_mean: 0.0,
            target_std: 1.0,
        };
        let mut model = Model::new(&cfg, &stats, &mut rng)?;
        model.mark_fitted();
        let probe: Vec<CalibSample> = (0..4)
            .map(|k| CalibSample {
                x: Matrix::randn(n, cfg.input_dim, 1.0, &mut rng),
                target: 0.0,
                timestamp: k,
                sensor_id: "bench".into(),
                raw_last: 0.0,
            })
            .collect();
        if cfg.uses_hash() {
            let enc = freeze_support(&model, &probe, cfg.support, &mut rng)?;
            model.set_encoder(enc)?;
        }
        let latency = best_latency(&model, &probe[0].x, opts)?;
        rows.push(ScalingRow {
            window: n,
            tokens: cfg.tokens(),
            latency,
            peak_activation_kb: peak_activation(&cfg),
            param_count: cfg.param_count(),
        });
    }
    Ok(rows)
}

fn opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &[&str] = &[
    "model",
    "val_rmse",
    "rmse",
    "top5_rmse",
    "top5_rmse_pooled",
    "latency_mean_ms",
    "latency_max_ms",
    "latency_min_ms",
    "latency_jitter_ms",
    "peak_activation_kb",
    "param_count",
    "mul_count",
    "add_count",
    "attn_code_mul",
    "timer_warning",
];

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            opt(r.val_rmse),
            r.rmse.to_string(),
            r.top5_rmse.to_string(),
            r.top5_rmse_pooled.to_string(),
            format!("{:.6}", r.latency.mean_ms),
            format!("{:.6}", r.latency.max_ms),
            format!("{:.6}", r.latency.min_ms),
            format!("{:.6}", r.latency.jitter_ms),
            format!("{:.4}", r.peak_activation_kb),
            r.param_count.to_string(),
            r.mul_count.to_string(),
            r.add_count.to_string(),
            r.attn_code_mul.to_string(),
            r.latency.warning.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[(ModelConfig, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "exp",
        "embedding",
        "patching",
        "attention",
        "sampling",
        "val_rmse",
        "test_rmse",
        "top5_rmse",
        "peak_activation_kb",
        "param_count",
    ])?;
    for (cfg, r) in rows {
        w.write_record([
            r.model.clone(),
            cfg.embedding.as_str().to_string(),
            cfg.patching.as_str().to_string(),
            cfg.attention.as_str().to_string(),
            cfg.sampling.as_str().to_string(),
            opt(r.val_rmse),
            r.rmse.to_string(),
            r.top5_rmse.to_string(),
            format!("{:.4}", r.peak_activation_kb),
            r.param_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scaling_csv(path: impl AsRef<Path>, rows: &[ScalingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "window",
        "tokens",
        "latency_mean_ms",
        "latency_max_ms",
        "latency_jitter_ms",
        "peak_activation_kb",
        "param_count",
    ])?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.tokens.to_string(),
            format!("{:.6}", r.latency.mean_ms),
            format!("{:.6}", r.latency.max_ms),
            format!("{:.6}", r.latency.jitter_ms),
            format!("{:.4}", r.peak_activation_kb),
            r.param_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt() as f32);
        assert!(matches!(rmse(&[], &[]), Err(Error::Domain(_))));
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        let mut rng = Rng::seed(3);
        for _ in 0..20 {
            let n = 1 + rng.below(200);
            let p: Vec<f32> = (0..n).map(|_| rng.normal() * 10.0).collect();
            let t: Vec<f32> = (0..n).map(|_| rng.normal() * 10.0).collect();
            let sq: Vec<f64> = p.iter().zip(&t).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).collect();
            let mean = sq.iter().sum::<f64>() / n as f64;
            let got = rmse(&p, &t).unwrap() as f64;
            assert!((got - mean.sqrt()).abs() <= 1e-7 * mean.sqrt().max(1.0));
        }
    }

    #[test]
    fn constant_series_selects_the_earliest_candidates() {
        let raw = vec![5.0; 40];
        assert_eq!(top5_indices(&raw).unwrap(), vec![1, 2]);
        let p: Vec<f32> = (0..40).map(|i| i as f32).collect();
        let t = vec![0.0; 40];
        let expect = rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(top5_rmse(&p, &t, &raw).unwrap(), expect);
    }

    #[test]
    fn single_spike_is_the_only_selection() {
        for s in 1..19 {
            let mut raw = vec![1.0; 20];
            raw[s] = 9.0;
            assert_eq!(top5_indices(&raw).unwrap(), vec![s]);
        }
    }

    #[test]
    fn short_series_keep_one_index() {
        assert_eq!(top5_indices(&[0.0, 1.0, 1.5]).unwrap(), vec![1]);
        assert!(top5_indices(&[1.0]).is_err());
    }

    #[test]
    fn known_selection_gives_plain_rmse_there() {
        let mut rng = Rng::seed(8);
        let n = 100;
        let spikes = [10, 30, 50, 70, 90];
        // A slow ramp with five unit steps; the steps are the only large jumps.
        let raw: Vec<f32> = (0..n)
            .map(|i| 0.001 * i as f32 + spikes.iter().filter(|&&s| s <= i).count() as f32)
            .collect();
        let p: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
        let t: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
        let sel = top5_indices(&raw).unwrap();
        assert_eq!(sel, spikes.to_vec());
        let pp: Vec<f32> = spikes.iter().map(|&i| p[i]).collect();
        let tt: Vec<f32> = spikes.iter().map(|&i| t[i]).collect();
        assert_eq!(top5_rmse(&p, &t, &raw).unwrap(), rmse(&pp, &tt).unwrap());
    }

    #[test]
    fn pooled_and_mean_agree_on_one_series() {
        let raw: Vec<f32> = (0..40).map(|i| ((i * 7) % 11) as f32).collect();
        let p: Vec<f32> = (0..40).map(|i| i as f32 * 0.1).collect();
        let t = vec![0.5; 40];
        let (mean, pooled) = top5_rmse_groups(&[(&p, &t, &raw)]).unwrap();
        assert_eq!(mean, pooled);
        assert_eq!(mean, top5_rmse(&p, &t, &raw).unwrap());
    }

    #[test]
    fn latency_order_statistics_and_jitter() {
        let mut k = 0u64;
        let s = latency_bench(
            || {
                k = black_box((0..2000u64).fold(k, |a, b| a.wrapping_mul(31).wrapping_add(b)));
                Ok(())
            },
            50,
            5,
        )
        .unwrap();
        assert_eq!(s.samples_ms.len(), 50);
        assert!(s.max_ms >= s.mean_ms && s.mean_ms >= s.min_ms);
        let mean = s.samples_ms.iter().sum::<f64>() / 50.0;
        let sd = (s.samples_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / 49.0).sqrt();
        assert!((sd - s.jitter_ms).abs() <= 1e-12 * sd.max(1.0));
    }

    #[test]
    fn stub_with_constant_samples_has_zero_jitter() {
        let s = LatencyStats::from_samples(vec![0.25; 50], None).unwrap();
        assert_eq!(s.jitter_ms, 0.0);
        assert_eq!((s.max_ms, s.mean_ms, s.min_ms), (0.25, 0.25, 0.25));
    }

    #[test]
    fn latency_propagates_errors() {
        let r = latency_bench(|| Err(Error::State("boom".into())), 5, 0);
        assert!(matches!(r, Err(Error::State(_))));
        assert!(latency_bench(|| Ok(()), 0, 0).is_err());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            window: 8,
            d_model: 2,
            d_ff: 4,
            code_bits: 4,
            support: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn peak_activation_hand_count() {
        // T = 3. embed 8 + 16 + 2 = 26, compress 16 + 6 = 22, project 24,
        // hash 24 + 2 + 4 + 6 = 36, attend 12 + 6 + 8 + 4 + 6 = 36,
        // ffn 6 + 12 + 6 = 24, head 7.
        assert_eq!(peak_activation_elements(&tiny()), 36);
        assert_eq!(peak_activation(&tiny()), 36.0 * 4.0 / 1024.0);
    }

    #[test]
    fn peak_activation_grows_with_width() {
        for exp in 1..=6 {
            let base = ModelConfig::default().ladder(exp).unwrap();
            let wide = ModelConfig { d_model: 16, ..base.clone() };
            assert!(peak_activation(&wide) > peak_activation(&base), "exp {exp}");
        }
    }

    #[test]
    fn lens_projector_lowers_peak_activation_at_360() {
        let base = ModelConfig { window: 360, ..ModelConfig::default() };
        let e1 = base.ladder(1).unwrap();
        let e2 = base.ladder(2).unwrap();
        assert!(peak_activation(&e2) < peak_activation(&e1));
    }

    #[test]
    fn dense_counts_scale_with_width() {
        let a = dense_op_counts(&tiny());
        let b = dense_op_counts(&ModelConfig { d_model: 4, ..tiny() });
        assert!(b.mul > a.mul && b.add > a.add);
        assert_eq!(a.code_mul, 0);
    }

    #[test]
    fn sensor_runs_split_on_id_changes() {
        let mk = |id: &str| CalibSample {
            x: Matrix::zeros(2, 1),
            target: 0.0,
            timestamp: 0,
            sensor_id: id.into(),
            raw_last: 0.0,
        };
        let s = vec![mk("a"), mk("a"), mk("b"), mk("c"), mk("c")];
        assert_eq!(sensor_runs(&s), vec![0..2, 2..3, 3..5]);
    }

    proptest! {
        #[test]
        fn top5_matches_sort_and_slice(raw in prop::collection::vec(-50.0f32..50.0, 2..300)) {
            let n = raw.len();
            let k = n.div_ceil(20).clamp(1, n - 1);
            let mut keyed: Vec<(f32, usize)> = (1..n).map(|i| ((raw[i] - raw[i - 1]).abs(), i)).collect();
            // Stable sort keeps index order among equal jumps.
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut want: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
            want.sort_unstable();
            prop_assert_eq!(top5_indices(&raw).unwrap(), want);
        }
    }
}

//! Mini-batch training with Adam on the mean squared error.
//!
//! Hashed models redraw their support set from the current batch's lens rows
//! before every `resample_every`-th batch (dynamic sampling) or draw it once
//! from the first batch (static sampling). After each epoch a frozen copy is
//! evaluated on the validation split and the best one is returned.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::data::{CalibSample, DatasetSplit};
use crate::error::{Error, NumericFailure, Result};
use crate::eval::{predict_all, rmse};
use crate::hash::{freeze_support, sample_support};
use crate::model::{Gradients, Mode, Model, ModelConfig, Sampling};
use crate::numerics::{adam_step, AdamConfig, AdamState, Matrix, Rng};

/// Terms of the training objective. There is exactly one.
pub const OBJECTIVE_TERMS: &[&str] = &["mse"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Batches between support redraws under dynamic sampling.
    pub resample_every: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            resample_every: 1,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.resample_every == 0 {
            return Err(Error::Config("`batch_size` and `resample_every` must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("`lr` must be a finite non-negative number".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("`grad_clip` must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_rmse: f32,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch (1-based) whose parameters were kept; 0 when none ran.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_rmse", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_rmse.to_string(),
                format!("{:.6}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean squared error and its gradient `2(p − t)/n`.
pub fn mse_loss(pred: &[f32], target: &[f32]) -> Result<(f32, Vec<f32>)> {
    if pred.is_empty() {
        return Err(Error::Domain("loss of an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::dim("mse_loss", format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f32;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        sum += (d as f64) * (d as f64);
        grad.push(2.0 * d / n);
    }
    Ok(((sum / n as f64) as f32, grad))
}

/// Optimizer state and random streams carried across epochs.
pub struct TrainState {
    adam: AdamState,
    adam_cfg: AdamConfig,
    shuffle_rng: Rng,
    support_rng: Rng,
    batches_seen: usize,
    support_drawn: bool,
}

impl TrainState {
    /// Streams are forked from `seed`: 2 for shuffling, 3 for support draws.
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let root = Rng::seed(cfg.seed);
        TrainState {
            adam: AdamState::new(model.trainable().into_iter().map(|(_, m)| m)),
            adam_cfg: AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            shuffle_rng: root.fork(2),
            support_rng: root.fork(3),
            batches_seen: 0,
            support_drawn: false,
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.step()
    }
}

fn param_norms(model: &Model) -> Vec<(String, f32)> {
    model.trainable().iter().map(|(n, m)| (n.to_string(), m.norm())).collect()
}

fn redraw_support(model: &mut Model, batch: &[&CalibSample], rng: &mut Rng) -> Result<()> {
    let lens = batch
        .iter()
        .map(|s| model.lens_representation(&s.x))
        .collect::<Result<Vec<Matrix>>>()?;
    let m = model.config().support;
    let support = sample_support(&lens, m, rng)?;
    model
        .encoder_mut()
        .ok_or_else(|| Error::State("model has no hash encoder".into()))?
        .set_support(support)
}

/// One pass over `data` in shuffled mini-batches. Returns the mean batch
/// loss.
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    data: &[CalibSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyData("training split is empty".into()));
    }
    cfg.validate()?;
    state.adam_cfg.lr = cfg.lr;
    let hashed = model.config().uses_hash();
    let dynamic = model.config().sampling == Sampling::Dynamic;
    let mut order: Vec<usize> = (0..data.len()).collect();
    state.shuffle_rng.shuffle(&mut order);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&CalibSample> = chunk.iter().map(|&i| &data[i]).collect();
        if hashed {
            let due = if dynamic {
                state.batches_seen % cfg.resample_every == 0
            } else {
                !state.support_drawn
            };
            if due {
                redraw_support(model, &batch, &mut state.support_rng)?;
                state.support_drawn = true;
            }
        }
        state.batches_seen += 1;

        let mut preds = Vec::with_capacity(batch.len());
        let mut fwds = Vec::with_capacity(batch.len());
        for s in &batch {
            let f = model.forward(&s.x, Mode::Train)?;
            preds.push(f.prediction);
            fwds.push(f);
        }
        let targets: Vec<f32> = batch.iter().map(|s| s.target).collect();
        let (loss, dloss) = mse_loss(&preds, &targets)?;
        let failure = |loss: f32| {
            Error::Numeric(NumericFailure {
                epoch,
                batch: b,
                loss,
                param_norms: param_norms(model),
            })
        };
        if !loss.is_finite() {
            return Err(failure(loss));
        }
        let mut grads: Option<Gradients> = None;
        for (f, &d) in fwds.iter().zip(&dloss) {
            let g = model.backward(f, d)?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(failure(f32::NAN));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
            grads.scale((cfg.grad_clip as f64 / norm) as f32);
        }
        let gm = grads.matrices();
        let mut params = model.trainable_mut();
        adam_step(&mut params, &gm, &mut state.adam, &state.adam_cfg)?;
        total += loss as f64;
        batches += 1;
    }
    Ok((total / batches as f64) as f32)
}

/// Frozen copy of `model` ready for inference: dynamic models draw their
/// final support from the lens rows of `train`; static ones keep theirs.
pub fn frozen_copy(model: &Model, train: &[CalibSample], rng: &mut Rng) -> Result<Model> {
    let mut out = model.clone();
    out.mark_fitted();
    if out.config().uses_hash() {
        let enc = match out.config().sampling {
            Sampling::Dynamic => freeze_support(&out, train, out.config().support, rng)?,
            Sampling::Static => {
                let mut e = out.encoder().expect("hashed model has an encoder").clone();
                e.freeze();
                e
            }
        };
        out.set_encoder(enc)?;
    }
    Ok(out)
}

/// Trains a fresh model and returns the frozen best-validation snapshot.
///
/// All randomness derives from `tcfg.seed`: stream 1 initializes parameters,
/// 2 shuffles, 3 draws training supports and 4 draws frozen supports.
pub fn fit(dataset: &DatasetSplit, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    tcfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyData("training split is empty".into()));
    }
    let root = Rng::seed(tcfg.seed);
    let mut model = Model::new(mcfg, &dataset.stats, &mut root.fork(1))?;
    let mut freeze_rng = root.fork(4);
    let mut state = TrainState::new(&model, tcfg);
    let mut history = TrainHistory::default();
    if tcfg.epochs == 0 {
        if model.config().uses_hash() && model.config().sampling == Sampling::Static {
            let first: Vec<&CalibSample> = dataset.train.iter().take(tcfg.batch_size).collect();
            redraw_support(&mut model, &first, &mut state.support_rng)?;
        }
        let frozen = frozen_copy(&model, &dataset.train, &mut freeze_rng)?;
        return Ok((frozen, history));
    }
    let val = if dataset.val.is_empty() {
        log::warn!("validation split is empty; selecting on the training split");
        &dataset.train
    } else {
        &dataset.val
    };
    let val_targets: Vec<f32> = val.iter().map(|s| s.target).collect();
    let mut best: Option<(f32, Model)> = None;
    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        let train_loss = train_epoch(&mut model, &mut state, &dataset.train, tcfg, epoch)?;
        let candidate = frozen_copy(&model, &dataset.train, &mut freeze_rng)?;
        let val_rmse = rmse(&predict_all(&candidate, val)?, &val_targets)?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val rmse {val_rmse:.5} ({seconds:.2}s)");
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_rmse,
            seconds,
        });
        if best.as_ref().is_none_or(|(b, _)| val_rmse < *b) {
            history.best_epoch = epoch;
            best = Some((val_rmse, candidate));
        }
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, history))
}

/// Writes `name,value` rows of a history summary; used by the CLI.
pub fn write_summary(mut out: impl Write, history: &TrainHistory) -> Result<()> {
    if let Some(best) = history.epochs.iter().find(|e| e.epoch == history.best_epoch) {
        writeln!(out, "best epoch {} val rmse {:.6}", best.epoch, best.val_rmse)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, synth_generate, SynthConfig};
    use crate::model::Arch;
    use crate::numerics::finite_diff_grad;

    fn small_dataset(length: usize, seed: u64) -> DatasetSplit {
        let cfg = SynthConfig {
            length,
            ..SynthConfig::default()
        };
        build_dataset(synth_generate(&cfg, seed).unwrap(), 16, 1).unwrap()
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        let (l, g) = mse_loss(&[0.0], &[2.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g, vec![-4.0]);
        assert!(matches!(mse_loss(&[], &[]), Err(Error::Domain(_))));
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = Rng::seed(1);
        let p = Matrix::randn(1, 7, 1.0, &mut rng);
        let t: Vec<f32> = (0..7).map(|_| rng.normal()).collect();
        let (_, g) = mse_loss(p.as_slice(), &t).unwrap();
        let f = |m: &Matrix| -> f64 {
            m.as_slice().iter().zip(&t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 7.0
        };
        let fd = finite_diff_grad(f, &p, 1e-2).unwrap();
        for (a, b) in g.iter().zip(fd.as_slice()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn objective_has_one_term() {
        assert_eq!(OBJECTIVE_TERMS, &["mse"]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small_dataset(300, 1);
        let mcfg = ModelConfig { window: 16, ..ModelConfig::default() };
        let tcfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let mut model = Model::new(&mcfg, &ds.stats, &mut Rng::seed(2)).unwrap();
        let before: Vec<Matrix> = model.trainable().into_iter().map(|(_, m)| m.clone()).collect();
        let mut state = TrainState::new(&model, &tcfg);
        let loss = train_epoch(&mut model, &mut state, &ds.train, &tcfg, 1).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let after: Vec<Matrix> = model.trainable().into_iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn epochs_zero_returns_frozen_model() {
        let ds = small_dataset(300, 2);
        for sampling in [Sampling::Dynamic, Sampling::Static] {
            let mcfg = ModelConfig { window: 16, sampling, ..ModelConfig::default() };
            let (m, h) = fit(&ds, &mcfg, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
            assert!(h.is_empty());
            assert!(m.is_fitted());
            assert!(m.encoder().unwrap().is_frozen());
            m.predict(&ds.test[0].x).unwrap();
        }
    }

    #[test]
    fn best_validation_is_kept() {
        let ds = small_dataset(400, 3);
        let mcfg = ModelConfig { window: 16, ..ModelConfig::default() };
        let tcfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
        let (m, h) = fit(&ds, &mcfg, &tcfg).unwrap();
        assert_eq!(h.len(), 4);
        let targets: Vec<f32> = ds.val.iter().map(|s| s.target).collect();
        let got = rmse(&predict_all(&m, &ds.val).unwrap(), &targets).unwrap();
        let best = h.epochs.iter().map(|e| e.val_rmse).fold(f32::INFINITY, f32::min);
        assert_eq!(got, best);
        assert!(got <= h.epochs.last().unwrap().val_rmse);
    }

    #[test]
    fn training_is_replayable() {
        let ds = small_dataset(300, 4);
        for arch in [Arch::Scare, Arch::NLinear] {
            let mcfg = ModelConfig { window: 16, arch, ..ModelConfig::default() };
            let tcfg = TrainConfig { epochs: 2, seed: 11, ..TrainConfig::default() };
            let (a, ha) = fit(&ds, &mcfg, &tcfg).unwrap();
            let (b, hb) = fit(&ds, &mcfg, &tcfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(
                ha.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>(),
                hb.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn support_rows_come_from_the_current_batch() {
        let ds = small_dataset(300, 5);
        let mcfg = ModelConfig { window: 16, ..ModelConfig::default() };
        let tcfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let mut model = Model::new(&mcfg, &ds.stats, &mut Rng::seed(6)).unwrap();
        let mut state = TrainState::new(&model, &tcfg);
        let mut shuffle = state.shuffle_rng.clone();
        let mut support = state.support_rng.clone();
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        shuffle.shuffle(&mut order);
        let batch: Vec<&CalibSample> = order[..8].iter().map(|&i| &ds.train[i]).collect();
        let mut expected = model.clone();
        redraw_support(&mut expected, &batch, &mut support).unwrap();
        // One batch of training draws exactly this support before stepping.
        let one = TrainConfig { batch_size: 8, ..tcfg };
        let tiny: Vec<CalibSample> = ds.train.clone();
        let _ = train_epoch(&mut model, &mut state, &tiny, &one, 1);
        let lens_rows: Vec<Vec<f32>> = batch
            .iter()
            .flat_map(|s| {
                let z = expected.lens_representation(&s.x).unwrap();
                (0..z.rows()).map(|r| z.row(r).to_vec()).collect::<Vec<_>>()
            })
            .collect();
        let s = expected.encoder().unwrap().support();
        for r in 0..s.rows() {
            assert!(lens_rows.iter().any(|row| row.as_slice() == s.row(r)));
        }
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let h = TrainHistory {
            epochs: vec![EpochStats { epoch: 1, train_loss: 2.0, val_rmse: 1.5, seconds: 0.25 }],
            best_epoch: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_rmse,seconds");
        assert_eq!(text.lines().count(), 2);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use scare::config::Settings;
use scare::data::{build_dataset, load_csv, synth_generate, write_csv, DatasetSplit, SensorSeries};
use scare::eval::{
    ablation_configs, compare_models, evaluate, model_latency, scaling_bench, write_ablation_csv, write_metrics_csv,
    write_scaling_csv,
};
use scare::model::{Arch, Model, ModelConfig};
use scare::train::fit;

#[derive(Parser)]
#[command(name = "scare", version, about = "Sensor calibration with a compressed binary-attention transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied after the settings file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Sensor CSV; synthetic data from the settings is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-sensor CSV.
    Synth(Common),
    /// Train a model; writes model.scare and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score a saved model, or train and compare SCARE, NLinear and DLinear
    /// when no model is given; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Latency of a saved model (latency.csv) and the window sweep
    /// (scaling.csv).
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the six ablation configurations; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Re-save a model and dump every tensor as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(p) => Settings::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => Settings::default(),
    };
    s.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

/// Creates the output directory and records the effective settings in it.
fn prepare(common: &Common, s: &Settings) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join("effective.conf"), s.render())?;
    Ok(())
}

fn series(s: &Settings, data: &DataArg) -> Result<Vec<SensorSeries>> {
    match &data.data {
        Some(p) => {
            let features: Vec<&str> = s.features.iter().map(String::as_str).collect();
            let loaded = load_csv(p, &features).with_context(|| format!("loading {}", p.display()))?;
            if loaded.dropped > 0 {
                log::warn!("dropped {} unusable rows from {}", loaded.dropped, p.display());
            }
            Ok(loaded.series)
        }
        None => Ok(synth_generate(&s.synth, s.train.seed)?),
    }
}

fn dataset(s: &Settings, data: &DataArg, window: usize) -> Result<DatasetSplit> {
    Ok(build_dataset(series(s, data)?, window, s.stride)?)
}

fn load(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let series = synth_generate(&s.synth, s.train.seed)?;
            let path = common.out.join("synth.csv");
            write_csv(&path, &series)?;
            println!("wrote {} ({} sensors x {} rows)", path.display(), series.len(), s.synth.length);
        }
        Command::Train { common, data } => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let ds = dataset(&s, &data, s.model.window)?;
            let (model, history) = fit(&ds, &s.model, &s.train)?;
            model.save(common.out.join("model.scare"))?;
            history.write_csv(common.out.join("history.csv"))?;
            match history.epochs.iter().find(|e| e.epoch == history.best_epoch) {
                Some(best) => println!("best epoch {} val rmse {:.6}", best.epoch, best.val_rmse),
                None => println!("no epochs run; saved the initial model"),
            }
        }
        Command::Eval { common, data, model, split } => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let reports = match model {
                Some(path) => {
                    let model = load(&path)?;
                    let ds = dataset(&s, &data, model.config().window)?;
                    let samples = match split {
                        Split::Train => &ds.train,
                        Split::Val => &ds.val,
                        Split::Test => &ds.test,
                    };
                    vec![evaluate(&model, "model", samples, &s.bench)?]
                }
                None => {
                    let ds = dataset(&s, &data, s.model.window)?;
                    let configs: Vec<(String, ModelConfig)> = [Arch::Scare, Arch::NLinear, Arch::DLinear]
                        .into_iter()
                        .map(|arch| (arch.as_str().to_string(), ModelConfig { arch, ..s.model.clone() }))
                        .collect();
                    compare_models(&ds, &configs, &s.train, &s.bench)?
                }
            };
            write_metrics_csv(common.out.join("metrics.csv"), &reports)?;
            for r in &reports {
                println!("{}: rmse {:.6} top5 {:.6} latency {:.4} ms", r.model, r.rmse, r.top5_rmse, r.latency.mean_ms);
            }
        }
        Command::Bench { common, model } => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let base = match &model {
                Some(path) => {
                    let m = load(path)?;
                    let x = scare::numerics::Matrix::zeros(m.config().window, m.config().input_dim);
                    let stats = model_latency(&m, &x, s.bench.reps, s.bench.warmup)?;
                    let mut w = csv::Writer::from_path(common.out.join("latency.csv"))?;
                    w.write_record(["run", "latency_ms"])?;
                    for (i, t) in stats.samples_ms.iter().enumerate() {
                        w.write_record([i.to_string(), format!("{t:.6}")])?;
                    }
                    w.flush()?;
                    println!(
                        "latency mean {:.4} ms, max {:.4} ms, jitter {:.4} ms",
                        stats.mean_ms, stats.max_ms, stats.jitter_ms
                    );
                    m.config().clone()
                }
                None => s.model.clone(),
            };
            let rows = scaling_bench(&base, &s.bench_windows, &s.bench, s.train.seed)?;
            write_scaling_csv(common.out.join("scaling.csv"), &rows)?;
            for r in &rows {
                println!("N={:5} T={:3} mean {:.4} ms", r.window, r.tokens, r.latency.mean_ms);
            }
        }
        Command::Ablate { common, data } => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let ds = dataset(&s, &data, s.model.window)?;
            let configs = ablation_configs(&s.model)?;
            let reports = compare_models(&ds, &configs, &s.train, &s.bench)?;
            let rows: Vec<_> = configs.into_iter().map(|(_, c)| c).zip(reports).collect();
            write_ablation_csv(common.out.join("ablation.csv"), &rows)?;
            for (_, r) in &rows {
                println!("{}: val rmse {:.6} test rmse {:.6}", r.model, r.val_rmse.unwrap_or(f32::NAN), r.rmse);
            }
        }
        Command::Export { common, model } => {
            let s = settings(&common)?;
            prepare(&common, &s)?;
            let m = load(&model)?;
            m.save(common.out.join("model.scare"))?;
            let dir = common.out.join("tensors");
            fs::create_dir_all(&dir)?;
            let mut tensors: Vec<(String, scare::numerics::Matrix)> =
                m.trainable().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
            if let Some(enc) = m.encoder() {
                tensors.push(("hash.support".into(), enc.support().clone()));
                tensors.push(("hash.proj".into(), enc.proj.clone()));
            }
            for (name, t) in &tensors {
                let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(format!("{name}.csv")))?;
                for r in 0..t.rows() {
                    w.write_record(t.row(r).iter().map(|v| v.to_string()))?;
                }
                w.flush()?;
            }
            println!("exported {} tensors to {}", tensors.len(), dir.display());
        }
    }
    Ok(())
}

/// 2 configuration, 3 data or file, 4 numeric failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use scare::Error as E;
    let core = err.chain().find_map(|e| e.downcast_ref::<E>());
    match core {
        Some(E::Config(_)) => 2,
        Some(
            E::Schema(_)
            | E::EmptyData(_)
            | E::InsufficientSensors { .. }
            | E::TooShort { .. }
            | E::Format(_)
            | E::Corrupt(_)
            | E::Io(_)
            | E::Csv(_),
        ) => 3,
        Some(E::Numeric(_)) => 4,
        Some(_) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>() || e.is::<csv::Error>()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

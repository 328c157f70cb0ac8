use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sst_core::checkpoint;
use sst_core::config::RunConfig;
use sst_core::data::{gather_batch, synth_generate, window_origins, write_csv, Dataset};
use sst_core::experiment::Splits;
use sst_core::model::Model;
use sst_core::scaling::{bench_scaling, Status};
use sst_core::train::{evaluate, train as fit, write_history};
use sst_core::{Error, Result};

use crate::Common;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// File, then `--set` overrides, then the dedicated flags.
pub fn resolve(common: &Common, seed_keys: &[&str]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| Error::Configuration(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.extend(seed_keys.iter().map(|k| format!("{k}={s}")));
    }
    if let Some(out) = &common.out {
        let quoted = toml_string(&out.to_string_lossy());
        sets.push(format!("output.dir={quoted}"));
    }
    RunConfig::resolve(text.as_deref(), &sets)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn prepare(cfg: &RunConfig) -> Result<(Splits, Model)> {
    let ds = cfg.load_data()?;
    let splits = cfg.splits(&ds)?;
    let spec = cfg.model_spec(ds.num_variates())?;
    let model = Model::build(&spec, cfg.train.seed)?;
    Ok((splits, model))
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common, &["train.seed"])?;
    let dir = out_dir(&cfg)?;
    let (splits, mut model) = prepare(&cfg)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let outcome = fit(&mut model, &splits.train, &splits.val, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}  {:.0} ms",
            r.epoch, r.train_loss, r.val_loss, r.elapsed_ms
        );
    })?;
    write_history(&outcome.history, BufWriter::new(File::create(dir.join("history.jsonl"))?))?;
    checkpoint::save(model.params(), dir.join("checkpoint.bin"))?;
    let report = evaluate(&model, &splits.test, cfg.train.eval_stride, cfg.train.batch_size)?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    println!(
        "{}: best epoch {} val {:.6}; test mse {:.6} mae {:.6} over {} windows -> {}",
        report.model,
        outcome.best_epoch,
        outcome.best_val_loss,
        report.mse,
        report.mae,
        report.windows,
        dir.display()
    );
    Ok(())
}

pub fn eval(common: &Common, checkpoint_path: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common, &["train.seed"])?;
    let path = checkpoint_path.unwrap_or_else(|| cfg.output.dir.join("checkpoint.bin"));
    if !path.is_file() {
        return Err(Error::Configuration(format!("checkpoint {} does not exist", path.display())));
    }
    let (splits, mut model) = prepare(&cfg)?;
    checkpoint::load_into(model.params_mut(), &path)?;
    let dir = out_dir(&cfg)?;
    let report = evaluate(&model, &splits.test, cfg.train.eval_stride, cfg.train.batch_size)?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    write_forecasts(&model, &splits.test, cfg.train.eval_stride, cfg.train.batch_size, &dir.join("forecast.csv"))?;
    println!(
        "{}: test mse {:.6} mae {:.6} over {} windows -> {}",
        report.model,
        report.mse,
        report.mae,
        report.windows,
        dir.display()
    );
    Ok(())
}

/// One row per (window, step, variate) with the forecast and the truth.
fn write_forecasts(model: &Model, ds: &Dataset, stride: usize, batch: usize, path: &Path) -> Result<()> {
    let (l, f) = (model.lookback(), model.horizon());
    let m = ds.num_variates();
    let origins = window_origins(ds, l, f, stride)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["window", "origin", "step", "variate", "forecast", "truth"])
        .map_err(csv_err)?;
    let mut k = 0usize;
    for chunk in origins.chunks(batch.max(1)) {
        let (x, y) = gather_batch(ds, chunk, l, f)?;
        let pred = model.predict(&x)?;
        for (b, &o) in chunk.iter().enumerate() {
            for step in 0..f {
                for j in 0..m {
                    let i = (b * f + step) * m + j;
                    w.write_record([
                        k.to_string(),
                        o.to_string(),
                        step.to_string(),
                        ds.variate_names[j].clone(),
                        format!("{:?}", pred.data()[i]),
                        format!("{:?}", y.data()[i]),
                    ])
                    .map_err(csv_err)?;
                }
            }
            k += 1;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn bench(common: &Common) -> Result<()> {
    let cfg = resolve(common, &["bench.seed"])?;
    let dir = out_dir(&cfg)?;
    let report = bench_scaling(&cfg.bench.models, &cfg.bench)?;

    let mut lines = BufWriter::new(File::create(dir.join("scaling.jsonl"))?);
    for r in &report.records {
        serde_json::to_writer(&mut lines, r)?;
        lines.write_all(b"\n")?;
    }
    lines.flush()?;
    fs::write(dir.join("slopes.json"), serde_json::to_string_pretty(&report.fits)? + "\n")?;

    let mut w = csv::Writer::from_path(dir.join("scaling.csv")).map_err(csv_err)?;
    w.write_record(["model", "L", "forward_backward_ms", "peak_bytes", "ok"])
        .map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.model.clone(),
            r.length.to_string(),
            format!("{:.4}", r.forward_backward_ms),
            r.peak_bytes.to_string(),
            u8::from(r.status == Status::Ok).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    for f in &report.fits {
        let slope = f.slope.map_or("insufficient".to_string(), |s| format!("{s:.3}"));
        let oom = f.first_oom.map_or("-".to_string(), |l| l.to_string());
        println!("{:<28} slope {slope:<12} points {}  first oom {oom}", f.model, f.points);
    }
    Ok(())
}

pub fn synth(common: &Common) -> Result<()> {
    let cfg = resolve(common, &["synth.seed"])?;
    let dir = out_dir(&cfg)?;
    let (ds, parts) = synth_generate(&cfg.synth)?;
    write_csv(&ds, dir.join("series.csv"))?;
    let mut w = csv::Writer::from_path(dir.join("components.csv")).map_err(csv_err)?;
    w.write_record(["t", "trend", "seasonal", "spikes", "noise", "value"])
        .map_err(csv_err)?;
    for t in 0..ds.len() {
        w.write_record([
            t.to_string(),
            format!("{:?}", parts.trend[t]),
            format!("{:?}", parts.seasonal[t]),
            format!("{:?}", parts.spikes[t]),
            format!("{:?}", parts.noise[t]),
            format!("{:?}", ds.value(t, 0)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    println!("{} steps -> {}", ds.len(), dir.display());
    Ok(())
}

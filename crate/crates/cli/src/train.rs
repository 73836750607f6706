use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fmr_core::training::{evaluate, Checkpoint, MetricsWriter, StepRecord, TrainConfig, Trainer};
use serde::Serialize;

use crate::config::{create_out, data_source, load_checkpoint, load_splits, read_json, write_json};
use crate::{EvalArgs, TrainArgs};

#[derive(Debug, Serialize)]
struct TrainResult {
    mode: &'static str,
    coef: f64,
    seed: u64,
    steps: usize,
    epochs: usize,
    h_init: Option<f64>,
    h_max: f64,
    final_lambda: f64,
    final_epoch_entropy: f64,
    train_accuracy: f64,
    test_accuracy: f64,
    checkpoint: PathBuf,
}

fn effective_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.regularizer {
        cfg.regularizer = r;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(f) = args.label_fraction {
        cfg.label_fraction = f;
    }
    if args.checkpoint_every.is_some() {
        cfg.checkpoint_every = args.checkpoint_every;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps the header and the records before `step`, so a resumed run
/// reproduces the uninterrupted log byte for byte.
fn truncate_metrics(path: &Path, step: usize) -> Result<bool> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(false);
    };
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if i > 0 {
            let record: StepRecord = serde_json::from_str(line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
            if record.step >= step {
                break;
            }
        }
        kept.push_str(line);
        kept.push('\n');
    }
    fs::write(path, kept).with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let out = create_out(&args.out)?;
    let metrics_path = out.join("metrics.jsonl");
    let (mut trainer, subset, test, append) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (train, test) = load_splits(&ckpt, &ckpt.config.data)?;
            let subset = ckpt.config.training_subset(&train)?;
            let trainer = Trainer::resume(&ckpt, subset.clone())?;
            log::info!("resuming {} at step {}", path.display(), ckpt.step);
            (
                trainer,
                subset,
                test,
                truncate_metrics(&metrics_path, ckpt.step)?,
            )
        }
        None => {
            let cfg = effective_config(&args)?;
            let (train, test) = cfg.data.load().context("loading data")?;
            let subset = cfg.training_subset(&train)?;
            (Trainer::new(&cfg, subset.clone())?, subset, test, false)
        }
    };
    let cfg = trainer.config().clone();
    write_json(&cfg, &out.join("config.json"))?;

    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(file));
    if !append {
        metrics.header(&trainer.header())?;
    }

    let (mode, coef) = cfg.regularizer.label();
    log::info!(
        "training {mode} (coef {coef}) seed {} for {} steps, h_init {:.4}",
        cfg.seed,
        trainer.total_steps(),
        trainer.schedule().h_init.unwrap_or(f64::NAN)
    );
    let per_epoch = trainer.batches_per_epoch();
    let (mut epoch_entropy, mut epoch_count, mut last_lambda) = (0.0, 0usize, 0.0);
    trainer.run(|t, r| {
        metrics.record(r)?;
        if r.step % per_epoch == 0 {
            epoch_entropy = 0.0;
            epoch_count = 0;
        }
        epoch_entropy += r.batch_entropy;
        epoch_count += 1;
        last_lambda = r.lambda;
        if (r.step + 1) % per_epoch == 0 {
            log::info!(
                "epoch {} loss_cls {:.4} lambda {:.3} entropy {:.4}",
                r.epoch,
                r.loss_cls,
                r.lambda,
                epoch_entropy / epoch_count as f64
            );
        }
        if let Some(every) = cfg.checkpoint_every {
            if t.step_index() % every == 0 {
                save(&t.checkpoint(), &out, t.step_index())?;
            }
        }
        Ok(())
    })?;
    metrics.into_inner().flush().context("flushing metrics")?;

    let ckpt_path = save(&trainer.checkpoint(), &out, trainer.step_index())?;
    let final_entropy = final_epoch_entropy(&metrics_path)?;
    let schedule = trainer.schedule().clone();
    let steps = trainer.step_index();
    let model = trainer.into_model();
    let result = TrainResult {
        mode,
        coef,
        seed: cfg.seed,
        steps,
        epochs: cfg.epochs,
        h_init: schedule.h_init,
        h_max: schedule.h_max,
        final_lambda: last_lambda,
        final_epoch_entropy: final_entropy,
        train_accuracy: evaluate(&model, &subset)?,
        test_accuracy: evaluate(&model, &test)?,
        checkpoint: ckpt_path,
    };
    write_json(&result, &out.join("result.json"))?;
    log::info!(
        "done: train accuracy {:.4}, test accuracy {:.4}",
        result.train_accuracy,
        result.test_accuracy
    );
    Ok(())
}

/// Mean batch entropy over the last epoch in the log.
fn final_epoch_entropy(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<StepRecord> = text
        .lines()
        .skip(1)
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    let Some(last) = records.last().map(|r| r.epoch) else {
        return Ok(f64::NAN);
    };
    let tail: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| r.batch_entropy)
        .collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

fn save(ckpt: &Checkpoint, out: &Path, step: usize) -> fmr_core::training::Result<PathBuf> {
    let path = out.join(format!("ckpt-{step}"));
    ckpt.save(&path)?;
    log::debug!("saved {}", path.display());
    Ok(path)
}

#[derive(Debug, Serialize)]
struct EvalResult {
    checkpoint: PathBuf,
    step: usize,
    train_accuracy: f64,
    test_accuracy: f64,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let out = create_out(&args.out)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let source = data_source(&ckpt, args.data.as_deref())?;
    let (train, test) = load_splits(&ckpt, &source)?;
    let model = ckpt.model()?;
    let train = ckpt.config.training_subset(&train)?;
    let result = EvalResult {
        checkpoint: args.checkpoint.clone(),
        step: ckpt.step,
        train_accuracy: evaluate(&model, &train)?,
        test_accuracy: evaluate(&model, &test)?,
    };
    write_json(
        &serde_json::json!({ "checkpoint": args.checkpoint, "data": source }),
        &out.join("config.json"),
    )?;
    write_json(&result, &out.join("eval.json"))?;
    log::info!(
        "train accuracy {:.4}, test accuracy {:.4}",
        result.train_accuracy,
        result.test_accuracy
    );
    Ok(())
}

//! Fine-tuning loop: cross-entropy plus an optional regularizer, momentum
//! SGD, per-step metrics and resumable checkpoints.
//!
//! Each step runs forward, computes the classification loss, adds the
//! regularizer term (for the dynamic mode, `lambda` comes from the entropy
//! average as it stood before this batch), backpropagates, updates the
//! parameters, and then folds this batch's feature entropy into the
//! running average.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Sgd, SgdConfig, Tape, TensorError};
use crate::data::{
    gen_biased_features, gen_glyph_images, load_feature_csv, load_glyph_archive, rng_stream,
    subsample_labels, BiasGenConfig, DataError, GlyphConfig, LabeledDataset, Split,
};
use crate::fmr::{
    self, initial_entropy, logit_entropy_loss, mean_negative_entropy, EntropySchedule, FmrError,
};
use crate::models::{Model, ModelConfig, ModelError, ModelState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fmr(#[from] FmrError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(
        "non-finite loss at step {step} (epoch {epoch}): loss_cls={loss_cls}, loss_fmr={loss_fmr}, lambda={lambda}"
    )]
    NonFinite {
        step: usize,
        epoch: usize,
        loss_cls: f64,
        loss_fmr: f64,
        lambda: f64,
    },
    #[error("training already finished after {0} steps")]
    Finished(usize),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint {path} has format version {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Auxiliary loss added to the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Regularizer {
    #[default]
    None,
    /// Feature entropy with the dynamic coefficient `beta * gap / initial gap`.
    FmrDynamic { beta: f64 },
    /// Feature entropy with a fixed coefficient.
    FmrStatic { lambda: f64 },
    /// Entropy of the softmax over logits, fixed weight.
    MaxentLogits { weight: f64 },
}

impl Regularizer {
    /// Mode name and coefficient, as used in sweep tables.
    pub fn label(&self) -> (&'static str, f64) {
        match *self {
            Regularizer::None => ("none", 0.0),
            Regularizer::FmrDynamic { beta } => ("fmr-dynamic", beta),
            Regularizer::FmrStatic { lambda } => ("fmr-static", lambda),
            Regularizer::MaxentLogits { weight } => ("maxent-logits", weight),
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, strict: bool| {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(TrainError::Config(format!(
                    "{name} must be {} 0, got {v}",
                    if strict { ">" } else { ">=" }
                )))
            }
        };
        match *self {
            Regularizer::None => Ok(()),
            Regularizer::FmrDynamic { beta } => check("beta", beta, true),
            // lambda = 0 is the switch-off point of the static sweep.
            Regularizer::FmrStatic { lambda } => check("lambda", lambda, false),
            Regularizer::MaxentLogits { weight } => check("weight", weight, true),
        }
    }
}

/// Parses `none`, `fmr-dynamic[:BETA]`, `fmr-static:LAMBDA` or
/// `maxent-logits:WEIGHT`.
impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (mode, arg) = match s.split_once(':') {
            Some((m, a)) => (m, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> std::result::Result<f64, String> {
            let a = a.ok_or_else(|| format!("`{mode}` needs a coefficient, e.g. `{mode}:10`"))?;
            a.parse().map_err(|_| format!("bad coefficient `{a}`"))
        };
        let r = match mode {
            "none" if arg.is_none() => Regularizer::None,
            "fmr-dynamic" => Regularizer::FmrDynamic {
                beta: if arg.is_some() {
                    num(arg)?
                } else {
                    fmr::DEFAULT_BETA
                },
            },
            "fmr-static" => Regularizer::FmrStatic { lambda: num(arg)? },
            "maxent-logits" => Regularizer::MaxentLogits { weight: num(arg)? },
            _ => return Err(format!("unknown regularizer `{s}`")),
        };
        r.validate().map_err(|e| e.to_string())?;
        Ok(r)
    }
}

/// Where training and test samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Biased(BiasGenConfig),
    Glyph(GlyphConfig),
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
    },
    GlyphArchive {
        train: PathBuf,
        test: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Biased(BiasGenConfig::default())
    }
}

impl DataSource {
    /// Loads or generates the `(train, test)` pair.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok(match self {
            DataSource::Biased(cfg) => gen_biased_features(cfg)?,
            DataSource::Glyph(cfg) => gen_glyph_images(cfg)?,
            DataSource::Csv {
                train,
                test,
                n_classes,
            } => {
                let tr = load_feature_csv(train, *n_classes, Split::Train)?;
                let classes = n_classes.unwrap_or(tr.n_classes);
                let mut te = load_feature_csv(test, Some(classes), Split::Test)?;
                te.n_classes = classes;
                (tr, te)
            }
            DataSource::GlyphArchive { train, test } => {
                (load_glyph_archive(train)?, load_glyph_archive(test)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub label_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub regularizer: Regularizer,
    pub ema_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (CLI runs only).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            model: ModelConfig::default_mlp(),
            data: DataSource::default(),
            label_fraction: 1.0,
            epochs: 60,
            batch_size: 24,
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            regularizer: Regularizer::None,
            ema_decay: fmr::DEFAULT_EMA_DECAY,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sgd().validate()?;
        self.regularizer.validate()?;
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "label_fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(TrainError::Config(
                "checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The training split after label-fraction subsetting.
    pub fn training_subset(&self, train: &LabeledDataset) -> Result<LabeledDataset> {
        Ok(subsample_labels(train, self.label_fraction, self.seed)?)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_fmr: f64,
    pub batch_entropy: f64,
    pub h_ema: f64,
    pub lambda: f64,
    pub train_batch_accuracy: f64,
}

/// First line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHeader {
    pub config: TrainConfig,
    pub h_init: f64,
    pub h_max: f64,
}

/// A step's record plus the optimized total, which the log omits.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub total_loss: f64,
}

pub const CHECKPOINT_FORMAT: &str = "fmr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub model: ModelState,
    pub velocity: Vec<Vec<f64>>,
    pub schedule: EntropySchedule,
    pub step: usize,
    pub epoch: usize,
    pub cursor: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer(&mut out, self).map_err(|e| io_err(e.into()))?;
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let corrupt = |reason: String| TrainError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        // Check the envelope first so a version bump is reported as such.
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(corrupt("not an fmr checkpoint".into()));
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(TrainError::CheckpointVersion {
                path: path.to_path_buf(),
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_state(&self.model)?)
    }
}

/// Stateful training run over one (already subsetted) training split.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    optimizer: Sgd,
    schedule: EntropySchedule,
    data: LabeledDataset,
    step: usize,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
}

const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_stream(seed, SHUFFLE_STREAM_BASE + epoch as u64);
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    /// Initializes the model from the seed and measures the initial feature
    /// entropy over the whole training split.
    pub fn new(config: &TrainConfig, train: LabeledDataset) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.model, config.seed)?;
        Self::check_data(&model, &train)?;
        let beta = match config.regularizer {
            Regularizer::FmrDynamic { beta } => beta,
            _ => 0.0,
        };
        let mut schedule = EntropySchedule::new(beta, model.feature_dim(), config.ema_decay)?;
        let h_init = initial_entropy(&model, &train, 256)?;
        schedule.initialize(h_init)?;
        let order = epoch_order(config.seed, 0, train.len());
        Ok(Self {
            config: config.clone(),
            optimizer: Sgd::new(config.sgd())?,
            model,
            schedule,
            data: train,
            step: 0,
            epoch: 0,
            cursor: 0,
            order,
        })
    }

    /// Continues a run from a checkpoint. `train` must be the same
    /// training subset the checkpointed run used.
    pub fn resume(checkpoint: &Checkpoint, train: LabeledDataset) -> Result<Self> {
        let config = checkpoint.config.clone();
        config.validate()?;
        let model = checkpoint.model()?;
        Self::check_data(&model, &train)?;
        let order = epoch_order(config.seed, checkpoint.epoch, train.len());
        Ok(Self {
            optimizer: Sgd::with_velocity(config.sgd(), checkpoint.velocity.clone())?,
            model,
            schedule: checkpoint.schedule.clone(),
            data: train,
            step: checkpoint.step,
            epoch: checkpoint.epoch,
            cursor: checkpoint.cursor,
            order,
            config,
        })
    }

    fn check_data(model: &Model, data: &LabeledDataset) -> Result<()> {
        data.validate()?;
        let expected = model.config().input_shape();
        if data.sample_shape != expected {
            return Err(ModelError::InputShape {
                expected,
                found: data.sample_shape.clone(),
            }
            .into());
        }
        if data.n_classes > model.n_classes() {
            return Err(TrainError::Config(format!(
                "dataset has {} classes but the head has {}",
                data.n_classes,
                model.n_classes()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn schedule(&self) -> &EntropySchedule {
        &self.schedule
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.batches_per_epoch() * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn header(&self) -> MetricsHeader {
        MetricsHeader {
            config: self.config.clone(),
            h_init: self.schedule.h_init.unwrap_or(f64::NAN),
            h_max: self.schedule.h_max,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.state(),
            velocity: self.optimizer.velocity().to_vec(),
            schedule: self.schedule.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.is_finished() {
            return Err(TrainError::Finished(self.step));
        }
        let bs = self.config.batch_size;
        let start = self.cursor * bs;
        let end = (start + bs).min(self.data.len());
        let indices = self.order[start..end].to_vec();
        let labels = self.data.batch_labels(&indices);

        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, true);
        let input = self.data.batch_inputs(&indices)?;
        let x = tape.leaf(&input);
        let out = self.model.forward(&mut tape, &params, x)?;
        let ce = tape.cross_entropy(out.logits, &labels)?;
        let neg_h = mean_negative_entropy(&mut tape, out.features)?;

        let (total, reg, lambda) = match self.config.regularizer {
            Regularizer::None => (ce, None, 0.0),
            Regularizer::FmrDynamic { .. } | Regularizer::FmrStatic { .. } => {
                let lambda = match self.config.regularizer {
                    Regularizer::FmrStatic { lambda } => lambda,
                    _ => self.schedule.lambda()?,
                };
                let reg = tape.scale(neg_h, lambda);
                (tape.add(ce, reg)?, Some(reg), lambda)
            }
            Regularizer::MaxentLogits { weight } => {
                let aux = logit_entropy_loss(&mut tape, out.logits)?;
                let reg = tape.scale(aux, weight);
                (tape.add(ce, reg)?, Some(reg), weight)
            }
        };
        let loss_cls = tape.scalar(ce);
        let loss_fmr = reg.map_or(0.0, |r| tape.scalar(r));
        let total_loss = tape.scalar(total);
        if !total_loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                epoch: self.epoch,
                loss_cls,
                loss_fmr,
                lambda,
            });
        }
        let batch_entropy = -tape.scalar(neg_h);
        let correct = argmax_rows(tape.value(out.logits), self.model.n_classes())
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();

        let grads = tape.backward(total)?;
        self.model.store_gradients(&params, &grads)?;
        self.optimizer.step(&mut self.model.parameters_mut())?;
        self.schedule.update(batch_entropy)?;

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss_cls,
            loss_fmr,
            batch_entropy,
            h_ema: self.schedule.h_ema,
            lambda,
            train_batch_accuracy: correct as f64 / labels.len() as f64,
        };

        self.step += 1;
        self.cursor += 1;
        if self.cursor == self.batches_per_epoch() {
            self.cursor = 0;
            self.epoch += 1;
            self.order = epoch_order(self.config.seed, self.epoch, self.data.len());
        }
        Ok(StepOutcome { record, total_loss })
    }

    /// Runs until the configured number of epochs is done, handing every
    /// record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let outcome = self.step()?;
            sink(self, &outcome.record)?;
        }
        Ok(())
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Single-pass argmax accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(256) {
        let out = model.forward_values(&dataset.batch_inputs(chunk)?)?;
        let preds = argmax_rows(out.logits.values(), model.n_classes());
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == dataset.labels[i])
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub schedule: EntropySchedule,
    pub header: MetricsHeader,
    pub records: Vec<StepRecord>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainRun {
    /// Mean batch entropy over the last epoch's records.
    pub fn final_epoch_entropy(&self) -> f64 {
        let Some(last) = self.records.last() else {
            return f64::NAN;
        };
        let tail: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == last.epoch)
            .map(|r| r.batch_entropy)
            .collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Trains on an explicit `(train, test)` pair, applying the label fraction.
pub fn train_on(
    config: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<TrainRun> {
    let subset = config.training_subset(train)?;
    let mut trainer = Trainer::new(config, subset.clone())?;
    let header = trainer.header();
    let mut records = Vec::with_capacity(trainer.total_steps());
    trainer.run(|_, r| {
        records.push(r.clone());
        Ok(())
    })?;
    let schedule = trainer.schedule().clone();
    let model = trainer.into_model();
    Ok(TrainRun {
        train_accuracy: evaluate(&model, &subset)?,
        test_accuracy: evaluate(&model, test)?,
        model,
        schedule,
        header,
        records,
    })
}

/// Resolves the data source and trains.
pub fn train(config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let (train, test) = config.data.load()?;
    train_on(config, &train, &test)
}

/// Appends the header and records as JSON lines.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let io = |e: std::io::Error| TrainError::Io {
            path: PathBuf::from("<metrics>"),
            source: e,
        };
        serde_json::to_writer(&mut self.out, value).map_err(|e| io(e.into()))?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }

    pub fn header(&mut self, header: &MetricsHeader) -> Result<()> {
        self.line(header)
    }

    pub fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.line(record)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

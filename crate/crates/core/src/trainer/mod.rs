//! Training loop, learning-rate schedules, early stopping and probability
//! export.

mod config;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, D};
use serde::Serialize;

use crate::data_io::{stream_batches, LabelSpace, SplitManifest};
use crate::ensemble::{decide, ProbMatrix};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_labels, MetricsReport};
use crate::model::Model;
use crate::nn::Ctx;
use crate::preprocess::{Mode, PreprocessSpec};

pub use config::{OptimizerConfig, OptimizerKind, ScheduleConfig, ScheduleKind, TrainRunConfig};
pub use optim::Optimizer;

/// Checkpoint file written inside a run directory.
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const HISTORY_FILE: &str = "history.csv";

/// `-log softmax(logits)[label]`, computed as
/// `(max - logits[label]) + ln(1 + Σ_{i≠argmax} exp(logits[i] - max))`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let top = crate::ensemble::argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max - logits[label]) + rest.ln_1p()
}

/// Learning rate for `epoch` (0-based).
pub fn step_schedule(epoch: usize, base_lr: f64, cfg: &ScheduleConfig) -> f64 {
    let exponent = match cfg.scheduler {
        ScheduleKind::Exponential => epoch,
        ScheduleKind::Multistep => cfg.milestones.iter().filter(|&&m| epoch >= m).count(),
    };
    base_lr * cfg.decay_rate.powi(exponent as i32)
}

/// Stops once validation accuracy has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records one validation result; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_accuracy)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fail = |e: &dyn std::fmt::Display| Error::WriteFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
        for rec in &self.epochs {
            w.serialize(rec).map_err(|e| fail(&e))?;
        }
        w.flush().map_err(|e| fail(&e))
    }
}

/// Runs epochs until `max_epochs` or early stopping. `run_epoch` trains and
/// validates one epoch; `on_best` is called after every new best.
pub fn fit(
    max_epochs: usize,
    patience: usize,
    mut run_epoch: impl FnMut(usize) -> Result<EpochRecord>,
    mut on_best: impl FnMut(usize) -> Result<()>,
) -> Result<TrainHistory> {
    let mut stopper = EarlyStopper::new(patience);
    let mut history = TrainHistory::default();
    for epoch in 0..max_epochs {
        let record = run_epoch(epoch)?;
        let improved = stopper.observe(epoch, record.val_accuracy);
        history.epochs.push(record);
        history.best_epoch = stopper.best_epoch();
        if improved {
            on_best(epoch)?;
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(history)
}

fn mix_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (step as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn argmax_rows(logits: &candle_core::Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

/// Eval-mode accuracy over a manifest.
pub fn accuracy(model: &Model, root: &Path, manifest: &SplitManifest, prep: PreprocessSpec, batch_size: usize) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    let ctx = Ctx::eval();
    for batch in stream_batches(root, manifest, prep, batch_size, Mode::Eval, 0, 0)? {
        let batch = batch?;
        let pred = argmax_rows(&model.logits(&batch.images, &ctx)?)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        total += batch.labels.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn dump_state(model: &Model, dir: &Path, epoch: usize, step: usize, lr: f64, labels: &[usize], loss: f64) -> PathBuf {
    let path = dir.join(format!("nonfinite-epoch{epoch}-step{step}.txt"));
    let mut text = format!("epoch {epoch}\nstep {step}\nlearning_rate {lr}\nloss {loss}\nlabels {labels:?}\n");
    for (name, var) in model.params.trainable() {
        let norm = var
            .as_tensor()
            .to_dtype(DType::F64)
            .and_then(|t| t.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>())
            .unwrap_or(f64::NAN);
        let _ = writeln!(text, "{name} {norm}");
    }
    if let Err(e) = std::fs::write(&path, text) {
        log::error!("could not write {}: {e}", path.display());
    }
    path
}

/// A finished run: the model holding its best weights, and the history.
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

/// Trains a fresh model (optionally starting from ImageNet backbone weights)
/// and writes `best.safetensors` and `history.csv` into `out_dir`.
pub fn train(
    cfg: &TrainRunConfig,
    labels: &LabelSpace,
    root: &Path,
    train_set: &SplitManifest,
    val_set: &SplitManifest,
    out_dir: &Path,
    backbone_weights: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for m in [train_set, val_set] {
        if let Some(r) = m.records.iter().find(|r| r.label >= labels.count()) {
            return Err(Error::LabelOutOfRange {
                label: r.label,
                classes: labels.count(),
                line: None,
            });
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let model = Model::build(cfg.model, &cfg.arch, labels.count(), cfg.drop_rate, cfg.seed, DType::F32)?;
    if let Some(path) = backbone_weights {
        let n = model.load_backbone_weights(path)?;
        log::info!("loaded {n} backbone tensors from {}", path.display());
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, model.params.trainable());
    let checkpoint = out_dir.join(BEST_CHECKPOINT);
    let config_text = cfg.to_toml_string()?;

    let history = fit(
        cfg.max_epochs,
        cfg.patience,
        |epoch| {
            let lr = step_schedule(epoch, cfg.optimizer.learning_rate, &cfg.schedule);
            optimizer.set_learning_rate(lr);
            let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
            let batches = stream_batches(root, train_set, cfg.preprocess, cfg.batch_size, Mode::Train, cfg.seed, epoch as u64)?;
            for (step, batch) in batches.enumerate() {
                let batch = batch?;
                let ctx = Ctx::train(mix_seed(cfg.seed, epoch, step));
                let (loss, logits) = model.loss(&batch.images, &batch.labels, &ctx)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    let dump = dump_state(&model, out_dir, epoch, step, lr, &batch.labels, value);
                    return Err(Error::NonFiniteLoss { epoch, step, dump });
                }
                optimizer.step(&loss.backward()?)?;
                let n = batch.labels.len();
                loss_sum += value * n as f64;
                seen += n;
                correct += argmax_rows(&logits)?
                    .iter()
                    .zip(&batch.labels)
                    .filter(|(p, l)| p == l)
                    .count();
            }
            let val_accuracy = accuracy(&model, root, val_set, cfg.preprocess, cfg.batch_size)?;
            let record = EpochRecord {
                epoch,
                learning_rate: lr,
                train_loss: loss_sum / seen.max(1) as f64,
                train_accuracy: correct as f64 / seen.max(1) as f64,
                val_accuracy,
            };
            log::info!(
                "{} epoch {epoch}: loss {:.4} train acc {:.4} val acc {:.4} lr {lr:.3e}",
                cfg.model,
                record.train_loss,
                record.train_accuracy,
                record.val_accuracy
            );
            Ok(record)
        },
        |epoch| {
            log::info!("new best at epoch {epoch}, saving {}", checkpoint.display());
            model.save(&checkpoint, labels, &[("config", config_text.clone())])
        },
    )?;
    history.write_csv(&out_dir.join(HISTORY_FILE))?;
    model.params.load(&checkpoint, true, |n| Some(n.to_string()))?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
    })
}

/// Eval-mode softmax rows for every decodable record, in manifest order.
pub fn predict_manifest(
    model: &Model,
    model_id: &str,
    root: &Path,
    manifest: &SplitManifest,
    prep: PreprocessSpec,
    batch_size: usize,
) -> Result<ProbMatrix> {
    let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for batch in stream_batches(root, manifest, prep, batch_size, Mode::Eval, 0, 0)? {
        let batch = batch?;
        let probs = model.probabilities(&batch.images)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (row, &i) in probs.into_iter().zip(&batch.indices) {
            let rec = &manifest.records[i];
            ids.push(rec.path.to_string_lossy().into_owned());
            labels.push(rec.label);
            values.extend(row);
        }
    }
    ProbMatrix::new(model_id, ids, labels, model.classes, values)
}

/// Metrics of the argmax decisions of a probability matrix.
pub fn metrics_of(probs: &ProbMatrix) -> Result<MetricsReport> {
    evaluate_labels(&probs.true_labels, &decide(probs), probs.num_classes())
}

/// Loads a checkpoint with the preprocessing it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(Model, LabelSpace, PreprocessSpec)> {
    let (model, labels, meta) = Model::load(path)?;
    let prep = match meta.get("config") {
        Some(text) => TrainRunConfig::from_toml_str(model.tag, text)?.preprocess,
        None => TrainRunConfig::defaults(model.tag).preprocess,
    };
    Ok((model, labels, prep))
}

/// Loads a checkpoint, predicts a manifest, writes the probability CSV and
/// returns it with its metrics.
pub fn evaluate_export(
    checkpoint: &Path,
    root: &Path,
    manifest: &SplitManifest,
    manifest_labels: &LabelSpace,
    out: &Path,
    batch_size: usize,
) -> Result<(ProbMatrix, MetricsReport)> {
    let (model, labels, prep) = load_checkpoint(checkpoint)?;
    if &labels != manifest_labels {
        return Err(Error::LabelSpaceMismatch(format!(
            "checkpoint has {} classes ({:?}...), data has {}",
            labels.count(),
            labels.names().first(),
            manifest_labels.count()
        )));
    }
    let probs = predict_manifest(&model, model.tag.as_str(), root, manifest, prep, batch_size)?;
    probs.write_csv(out)?;
    let report = metrics_of(&probs)?;
    Ok((probs, report))
}

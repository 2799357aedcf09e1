//! Training, evaluation and ablation drivers.

mod ablate;
mod adam;
mod checkpoint;
mod runlog;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, parse_grid, AblationCell, AblationRow, AblationTable, GridSpec};
pub use adam::{Adam, AdamConfig};
pub use checkpoint::{config_mismatch, save_checkpoint, Checkpoint, CheckpointMeta};
pub use runlog::{window_means, EpochRecord, Record, RunLog, StepRecord};
pub use schedule::lr_schedule;

use crate::data::{augment, kfold_split, mix_seed, AugmentParams, Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, total_loss, LabelBatch, LossWeights};
use crate::metrics::{MetricsReport, Prediction, ThresholdSweep};
use crate::network::{DbfNet, ModelConfig};

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const RUNLOG_FILE: &str = "runlog.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub lr0: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Caps the schedule length; training stops once it is reached.
    pub max_steps: Option<usize>,
    pub fold: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub deterministic: bool,
    pub augment: bool,
    /// Train on every sample and validate on the training set.
    pub train_on_all: bool,
    /// Validate every `val_every` epochs (and always after the last one).
    pub val_every: usize,
    /// Save `last` every `checkpoint_every` epochs (and always after the last one).
    pub checkpoint_every: usize,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many completed epochs, keeping the
    /// schedule of the full run.
    pub stop_after_epoch: Option<usize>,
    /// Number of loader threads; forced to 1 in deterministic mode.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            lr0: 0.001,
            poly_power: 0.9,
            batch_size: 2,
            max_epochs: 300,
            max_steps: None,
            fold: 0,
            seed: 0,
            checkpoint_dir: PathBuf::from("runs"),
            deterministic: false,
            augment: true,
            train_on_all: false,
            val_every: 1,
            checkpoint_every: 1,
            resume: None,
            stop_after_epoch: None,
            workers: 1,
        }
    }
}

/// Settings of the desk-scale overfit experiment.
pub const SYNTHETIC_IMAGES: usize = 8;
pub const SYNTHETIC_SIZE: usize = 128;
pub const SYNTHETIC_WIDTH_DIVISOR: usize = 8;
pub const SYNTHETIC_BATCH: usize = 2;
pub const SYNTHETIC_STEPS: usize = 500;

impl TrainConfig {
    /// Dataset presets: batch size and epochs per dataset, or the synthetic
    /// overfit setting.
    pub fn preset(name: &str, data_root: impl Into<PathBuf>) -> Result<Self> {
        let dataset = DatasetSpec::preset(name, data_root)?;
        let base = Self {
            dataset,
            ..Self::default()
        };
        Ok(match name {
            "busi" => Self {
                batch_size: 2,
                max_epochs: 300,
                ..base
            },
            "uns" => Self {
                batch_size: 4,
                max_epochs: 100,
                ..base
            },
            "uhes" => Self {
                batch_size: 6,
                max_epochs: 350,
                ..base
            },
            "synthetic" => Self {
                model: ModelConfig::default().slimmed(SYNTHETIC_WIDTH_DIVISOR),
                batch_size: SYNTHETIC_BATCH,
                max_epochs: SYNTHETIC_STEPS * SYNTHETIC_BATCH / SYNTHETIC_IMAGES,
                max_steps: Some(SYNTHETIC_STEPS),
                augment: false,
                train_on_all: true,
                val_every: SYNTHETIC_STEPS,
                checkpoint_every: SYNTHETIC_STEPS,
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !self.poly_power.is_finite() || self.poly_power < 0.0 {
            return Err(Error::Config("poly_power must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.val_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("val_every and checkpoint_every must be >= 1".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if !self.train_on_all && self.fold >= self.dataset.fold_count {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.fold, self.dataset.fold_count
            )));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// `(train ids, validation ids)` for this config's fold.
    pub fn split(&self, ids: &[String]) -> Result<(Vec<String>, Vec<String>)> {
        if self.train_on_all {
            return Ok((ids.to_vec(), ids.to_vec()));
        }
        kfold_split(ids, self.dataset.fold_count, self.fold, self.dataset.seed)
    }
}

pub struct TrainOutcome {
    pub model: DbfNet,
    pub run_log: RunLog,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_dsc: Option<f64>,
    /// True when `stop_after_epoch` ended the run before the schedule did.
    pub interrupted: bool,
}

/// Stacks images into a (B, 3, H, W) tensor.
pub fn image_batch(samples: &[&Sample], dtype: DType) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Shape("batch has mixed image sizes".into()));
        }
        data.extend_from_slice(&s.image.data);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Foreground probabilities for one sample, in eval mode.
pub fn predict(net: &DbfNet, sample: &Sample) -> Result<Vec<f64>> {
    let x = image_batch(&[sample], net.dtype())?;
    let out = net.forward(&x, false)?;
    Ok(sigmoid(&out.final_logits)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Runs inference on `ids` and aggregates metrics.
pub fn evaluate_model(
    net: &DbfNet,
    dataset: &Dataset,
    ids: &[String],
    fold: Option<usize>,
    sweep: &ThresholdSweep,
) -> Result<MetricsReport> {
    let samples = ids.iter().map(|id| dataset.load(id)).collect::<Result<Vec<_>>>()?;
    let probs = samples.iter().map(|s| predict(net, s)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<Prediction<'_>> = samples
        .iter()
        .zip(probs)
        .map(|(s, probs)| Prediction {
            id: &s.id,
            probs,
            target: &s.labels.final_mask,
        })
        .collect();
    MetricsReport::from_predictions(&dataset.spec().name, fold, &preds, dataset.spec().spacing_tuple(), sweep)
}

/// Loads a checkpoint, evaluates the validation split of `fold` and writes
/// the report files into `out_dir`. When `expected` is given the
/// checkpoint's model config must match it.
pub fn evaluate(
    checkpoint: &Path,
    spec: &DatasetSpec,
    fold: usize,
    expected: Option<&ModelConfig>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(cfg) = expected {
        if let Some(field) = config_mismatch(cfg, &ckpt.meta.model) {
            return Err(Error::Checkpoint(format!("model config mismatch at field `{field}`")));
        }
    }
    let net = ckpt.build_model(DType::F32)?;
    let dataset = Dataset::open(spec.clone())?;
    let (_, val) = kfold_split(dataset.ids(), spec.fold_count, fold, spec.seed)?;
    let report = evaluate_model(&net, &dataset, &val, Some(fold), &ThresholdSweep::default())?;
    report.write(out_dir)?;
    Ok(report)
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    batch_ids: &'a [String],
    terms: Vec<(String, f64)>,
    lambdas: Vec<f64>,
}

fn batch_samples(
    dataset: &Dataset,
    ids: &[String],
    config: &TrainConfig,
    epoch: usize,
    positions: &[usize],
) -> Result<Vec<Arc<Sample>>> {
    let workers = if config.deterministic { 1 } else { config.workers };
    let raw = dataset.load_many(ids, workers)?;
    if !config.augment {
        return Ok(raw);
    }
    let [h, w] = dataset.spec().target_size;
    raw.iter()
        .zip(positions)
        .map(|(s, &pos)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, pos as u64]));
            let p = AugmentParams::sample(&mut rng, h, w);
            Ok(Arc::new(augment(s, &p, dataset.spec().distance_metric)?))
        })
        .collect()
}

/// Full training run on `config.dataset`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = Dataset::open(config.dataset.clone())?;
    train_on(config, &dataset)
}

/// Training run on an already opened dataset.
pub fn train_on(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_ids, val_ids) = config.split(dataset.ids())?;
    if train_ids.len() < config.batch_size {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a batch of {}",
            train_ids.len(),
            config.batch_size
        )));
    }
    let steps_per_epoch = train_ids.len() / config.batch_size;
    let schedule_steps = config
        .max_steps
        .map_or(config.max_epochs * steps_per_epoch, |m| m.min(config.max_epochs * steps_per_epoch));
    let total_epochs = schedule_steps.div_ceil(steps_per_epoch);

    let dir = &config.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(RUNLOG_FILE);

    let net = DbfNet::new(&config.model, DType::F32, config.seed)?;
    let mut adam = Adam::new(net.store().params(), config.adam)?;
    let mut start_epoch = 0;
    let mut step = 0;
    let mut best_val_dsc: Option<f64> = None;
    let mut run_log = RunLog::default();
    if let Some(path) = &config.resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.apply(&net)?;
        ckpt.restore_optimizer(&mut adam)?;
        start_epoch = ckpt.meta.epoch;
        step = ckpt.meta.step;
        best_val_dsc = ckpt.meta.best_val_dsc;
        if log_path.exists() {
            run_log = RunLog::read_jsonl(&log_path)?;
            run_log.records.retain(|r| match r {
                Record::Step(s) => s.step < step,
                Record::Epoch(e) => e.epoch < start_epoch,
            });
        }
    }
    run_log.write_jsonl(&log_path)?;

    let started = Instant::now();
    let mut best_checkpoint = best_val_dsc.map(|_| dir.join(BEST_CHECKPOINT));
    let last_checkpoint = dir.join(LAST_CHECKPOINT);
    let mut interrupted = false;
    let meta = |net: &DbfNet, adam: &Adam, epoch: usize, step: usize, best: Option<f64>| -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            model: config.model.clone(),
            epoch,
            step,
            seed: config.seed,
            lambdas: net.lambda_values()?,
            adam_step: adam.step_count(),
            best_val_dsc: best,
        })
    };

    for epoch in start_epoch..total_epochs {
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks_exact(config.batch_size) {
            if step >= schedule_steps {
                break;
            }
            let ids: Vec<String> = chunk.iter().map(|&i| train_ids[i].clone()).collect();
            let samples = batch_samples(dataset, &ids, config, epoch, chunk)?;
            let refs: Vec<&Sample> = samples.iter().map(|s| s.as_ref()).collect();
            let x = image_batch(&refs, net.dtype())?;
            let labels = LabelBatch::from_labels(&refs.iter().map(|s| &s.labels).collect::<Vec<_>>(), net.dtype())?;

            let lr = lr_schedule(step, schedule_steps, config.lr0, config.poly_power)?;
            let out = net.forward(&x, true)?;
            let loss = total_loss(&out, &labels, &config.loss)?;
            let value = loss.total_value()?;
            if !value.is_finite() {
                let dump = NanDump {
                    step,
                    epoch,
                    batch_ids: &ids,
                    terms: loss.terms.iter().map(|t| (t.name.clone(), t.value)).collect(),
                    lambdas: out.lambda_values.clone(),
                };
                let path = dir.join("nan_dump.json");
                fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
                return Err(Error::Training(format!(
                    "non-finite loss at step {step} (epoch {epoch}) on batch {ids:?}; dump at {}",
                    path.display()
                )));
            }
            let grads = loss.total.backward()?;
            adam.step(&grads, lr)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: value,
                terms: loss.terms.iter().map(|t| (t.name.clone(), t.value)).collect(),
                lambdas: out.lambda_values,
            };
            log::debug!("step {step} lr {lr:.3e} loss {value:.5}");
            RunLog::append_jsonl(&log_path, &Record::Step(rec.clone()))?;
            run_log.records.push(Record::Step(rec));
            epoch_loss += value;
            epoch_steps += 1;
            step += 1;
        }

        let done = epoch + 1;
        let last_epoch = done == total_epochs;
        let stopping = config.stop_after_epoch == Some(done) && !last_epoch;
        let (mut val_dsc, mut val_hd) = (None, None);
        if !val_ids.is_empty() && (done % config.val_every == 0 || last_epoch) {
            let report = evaluate_model(&net, dataset, &val_ids, Some(config.fold), &ThresholdSweep::Uniform(50))?;
            val_dsc = Some(report.dsc.mean);
            val_hd = (report.hd.count > 0).then_some(report.hd.mean);
            if best_val_dsc.is_none_or(|b| report.dsc.mean > b) {
                best_val_dsc = Some(report.dsc.mean);
                let path = dir.join(BEST_CHECKPOINT);
                save_checkpoint(&path, &net, Some(&adam), &meta(&net, &adam, done, step, best_val_dsc)?)?;
                best_checkpoint = Some(path);
            }
        }
        let rec = EpochRecord {
            epoch,
            step,
            mean_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_dsc,
            val_hd,
            lambdas: net.lambda_values()?,
            wall_clock: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {done}/{total_epochs} loss {:.5} val dsc {:?} lambdas {:?}",
            rec.mean_loss,
            rec.val_dsc,
            rec.lambdas
        );
        RunLog::append_jsonl(&log_path, &Record::Epoch(rec.clone()))?;
        run_log.records.push(Record::Epoch(rec));
        if done % config.checkpoint_every == 0 || last_epoch || stopping {
            save_checkpoint(&last_checkpoint, &net, Some(&adam), &meta(&net, &adam, done, step, best_val_dsc)?)?;
        }
        if stopping {
            interrupted = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model: net,
        run_log,
        train_ids,
        val_ids,
        last_checkpoint,
        best_checkpoint,
        best_val_dsc,
        interrupted,
    })
}

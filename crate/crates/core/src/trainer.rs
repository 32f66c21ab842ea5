//! Fine-tuning, evaluation, GA fitness and per-block accuracy.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::ga::{FitnessFn, Genotype};
use crate::model::BlockedModel;
use crate::nn::{argmax, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Which split GA fitness is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitnessSplit {
    #[default]
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Epochs of the final fine-tune.
    pub epochs: usize,
    /// Epochs of each block-accuracy run.
    pub block_accuracy_epochs: usize,
    pub seed: u64,
    pub fitness_split: FitnessSplit,
    /// Stop once validation accuracy has not improved for `patience` epochs.
    pub early_stopping: bool,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            batch_size: 32,
            epochs: 100,
            block_accuracy_epochs: 20,
            seed: 0,
            fitness_split: FitnessSplit::Val,
            early_stopping: false,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.block_accuracy_epochs == 0 {
            return Err(Error::Config("train.batch_size and epoch counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> Adam {
        match self.optimizer {
            Optimizer::Adam => Adam::new(
                self.learning_rate as f32,
                self.beta1 as f32,
                self.beta2 as f32,
                self.adam_eps as f32,
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub curves: Vec<EpochMetrics>,
    /// Wall-clock seconds.
    pub training_time: f64,
    pub optimizer_steps: usize,
}

/// Appends per-epoch rows to a CSV file.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,train_acc,val_acc,elapsed_s";

    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { file })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{},{},{},{:.3}", m.epoch, m.train_acc, m.val_acc, m.elapsed_s)
            .map_err(|e| Error::io("<metrics>", e))
    }
}

/// Trains the currently trainable stages for `epochs` epochs.
///
/// Each epoch visits the training split in a permutation derived from
/// `(seed, epoch)`. Training accuracy is the running accuracy over the
/// epoch's batches; validation accuracy is measured in inference mode after
/// the epoch.
pub fn fine_tune(
    model: &mut BlockedModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    mut log: Option<&mut MetricsLog>,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    let mut opt = cfg.optimizer();
    let start = Instant::now();
    let mut curves = Vec::with_capacity(epochs);
    let mut steps = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..epochs {
        let order = train.epoch_order(Some((cfg.seed, epoch as u64)));
        let flips = train.augment_flip.then(|| derive_seed(cfg.seed, 0xf11b ^ epoch as u64));
        let (mut correct, mut count) = (0usize, 0usize);
        for (step, batch) in train.batches(&order, cfg.batch_size, flips).enumerate() {
            if batch.labels.is_empty() {
                continue;
            }
            let stats = model.network_mut().train_step(&batch.x, &batch.labels, &mut opt);
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: stats.loss,
                });
            }
            steps += 1;
            correct += stats.correct;
            count += stats.count;
        }
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(model, val, cfg.batch_size)?.accuracy
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_acc: correct as f64 / count.max(1) as f64,
            val_acc,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {} train {:.4} val {:.4}", m.epoch, m.train_acc, m.val_acc);
        if let Some(l) = log.as_deref_mut() {
            l.append(&m)?;
        }
        curves.push(m);
        if cfg.early_stopping {
            if val_acc > best_val {
                best_val = val_acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(FineTuneOutcome {
        curves,
        training_time: start.elapsed().as_secs_f64(),
        optimizer_steps: steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ms_per_batch: f64,
    pub correct: usize,
    pub total: usize,
}

/// Inference-mode accuracy over the whole split and mean wall-clock per
/// batch.
pub fn evaluate(model: &mut BlockedModel, split: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptySplit(format!("{}: evaluation split is empty", split.name)));
    }
    let order: Vec<usize> = (0..split.len()).collect();
    let (mut correct, mut total, mut batches) = (0usize, 0usize, 0usize);
    let mut elapsed = 0.0;
    for batch in split.batches(&order, batch_size, None) {
        if batch.labels.is_empty() {
            continue;
        }
        let t = Instant::now();
        let logits = model.network_mut().predict(&batch.x);
        elapsed += t.elapsed().as_secs_f64();
        for (i, &y) in batch.labels.iter().enumerate() {
            if argmax(logits.sample(i)) == y {
                correct += 1;
            }
        }
        total += batch.labels.len();
        batches += 1;
    }
    if total == 0 {
        return Err(Error::EmptySplit(format!("{}: no readable images", split.name)));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        ms_per_batch: 1e3 * elapsed / batches as f64,
        correct,
        total,
    })
}

/// One-epoch fitness of a genotype: a fresh model from `factory`, the
/// genotype applied, one epoch of training, accuracy on the evaluation
/// split. Results are cached per `(genotype, config_hash)`.
pub struct GaFitness<'a, F> {
    factory: F,
    train: &'a Dataset,
    eval: &'a Dataset,
    cfg: TrainConfig,
    config_hash: String,
    cache: Mutex<BTreeMap<(Genotype, String), f64>>,
    trainings: AtomicUsize,
    steps: AtomicUsize,
}

impl<'a, F> GaFitness<'a, F>
where
    F: Fn() -> Result<BlockedModel> + Sync,
{
    pub fn new(factory: F, train: &'a Dataset, eval: &'a Dataset, cfg: TrainConfig, config_hash: &str) -> Self {
        GaFitness {
            factory,
            train,
            eval,
            cfg,
            config_hash: config_hash.to_string(),
            cache: Mutex::new(BTreeMap::new()),
            trainings: AtomicUsize::new(0),
            steps: AtomicUsize::new(0),
        }
    }

    /// Genotypes actually trained (cache misses).
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::Relaxed)
    }

    pub fn optimizer_steps(&self) -> usize {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn fitness(&self, g: &Genotype) -> Result<f64> {
        let key = (g.clone(), self.config_hash.clone());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let mut model = (self.factory)()?.with_genotype(g)?;
        let out = fine_tune(&mut model, self.train, &Dataset::empty_like(self.train), &self.cfg, 1, None)?;
        let acc = evaluate(&mut model, self.eval, self.cfg.batch_size)?.accuracy;
        self.trainings.fetch_add(1, Ordering::Relaxed);
        self.steps.fetch_add(out.optimizer_steps, Ordering::Relaxed);
        self.cache.lock().expect("cache lock").insert(key, acc);
        Ok(acc)
    }
}

impl<F> FitnessFn for GaFitness<'_, F>
where
    F: Fn() -> Result<BlockedModel> + Sync,
{
    fn evaluate(&self, genotype: &Genotype) -> Result<f64> {
        self.fitness(genotype)
    }

    fn is_stateless(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAccuracy {
    pub block_id: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Fine-tunes with exactly one block (plus head) trainable and reports the
/// final train and test accuracy, both measured in inference mode.
pub fn block_accuracy<F>(
    block_id: usize,
    factory: &F,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<BlockAccuracy>
where
    F: Fn() -> Result<BlockedModel>,
{
    let mut model = factory()?;
    let b = model.num_blocks();
    if block_id == 0 || block_id > b {
        return Err(Error::Contract(format!("block {block_id} outside 1..={b}")));
    }
    model.apply_genotype(&Genotype::one_hot(b, block_id)?)?;
    fine_tune(&mut model, train, test, cfg, cfg.block_accuracy_epochs, None)?;
    Ok(BlockAccuracy {
        block_id,
        train_acc: evaluate(&mut model, train, cfg.batch_size)?.accuracy,
        test_acc: evaluate(&mut model, test, cfg.batch_size)?.accuracy,
    })
}

/// The persisted result of one selection-plus-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    /// Seconds.
    pub selection_runtime: f64,
    /// Seconds.
    pub training_time: f64,
    /// Milliseconds per batch.
    pub evaluation_time: f64,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub genotype: Genotype,
    pub config_hash: String,
    pub seed: u64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        let times_ok = [self.selection_runtime, self.training_time, self.evaluation_time]
            .iter()
            .all(|t| *t >= 0.0);
        if !times_ok || !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Contract(format!("invalid experiment record {self:?}")));
        }
        Ok(())
    }
}

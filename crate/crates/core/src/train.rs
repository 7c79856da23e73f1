//! Mini-batch training, evaluation and the plateau learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tssan_tensor::{AdamConfig, AdamState, Tape};

use crate::consensus::{fused_probabilities, ts_forward, ts_loss, TsnConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, VariantConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            plateau_patience: 5,
            lr_factor: 0.5,
            weight_decay: 5e-5,
            batch_size: 64,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("patience, batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: VariantConfig,
    pub tsn: TsnConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tsn.validate()?;
        self.train.validate()?;
        if self.tsn.frames_per_segment > self.model.max_frames {
            return Err(Error::Config(format!(
                "frames_per_segment {} exceeds max_frames {}",
                self.tsn.frames_per_segment, self.model.max_frames
            )));
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` epochs without a strict
/// improvement of the best validation top-1, then restarts the count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub stale_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            stale_epochs: 0,
        }
    }

    /// Records one epoch's validation top-1 and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, top1: f64) -> f64 {
        if self.best.is_none_or(|b| top1 > b) {
            self.best = Some(top1);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                self.lr *= self.factor;
                self.stale_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Learning rate after this epoch's schedule update.
    pub lr: f64,
    /// Wall time of the epoch; excluded from checkpoints so they stay reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl MetricsRecord {
    /// Deterministic log line: epoch, loss, accuracies and learning rate.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={} top1={} top5={} lr={}",
            self.epoch, self.train_loss, self.top1, self.top5, self.lr
        )
    }

    pub fn timing_line(&self) -> String {
        format!("epoch={} seconds={:.3}", self.epoch, self.wall_seconds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Whether `label` is among the `k` largest entries of `probs`, counting
/// equal entries with a lower index as larger.
pub fn in_top_k(probs: &[f64], label: usize, k: usize) -> bool {
    let p = probs[label];
    let rank = probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count();
    rank < k
}

/// Top-1 and top-5 accuracy of probability vectors against labels.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Accuracy {
    let n = labels.len().max(1) as f64;
    let hits = |k| probs.iter().zip(labels).filter(|(p, &y)| in_top_k(p, y, k)).count() as f64 / n;
    Accuracy {
        top1: hits(1),
        top5: hits(5),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Model, optimizer, schedule and random stream of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<MetricsRecord>,
}

impl Trainer {
    /// Initializes parameters from the seeded stream that also drives
    /// shuffling, augmentation and dropout.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let adam = AdamState::new(&model.store, AdamConfig::default());
        let t = &config.train;
        let scheduler = PlateauScheduler::new(t.lr, t.lr_factor, t.plateau_patience);
        Ok(Self {
            config,
            model,
            adam,
            scheduler,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr
    }

    /// One pass over shuffled mini-batches with augmentation and dropout on.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<&[usize]> = order.chunks(self.config.train.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let mut step_losses = Vec::with_capacity(batches.len());
        for (step, idx) in batches.into_iter().enumerate() {
            let loss = self.train_step(data, idx)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch + 1,
                    step: step + 1,
                });
            }
            step_losses.push(loss);
        }
        let mean_loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        Ok(EpochStats {
            mean_loss,
            step_losses,
        })
    }

    fn train_step(&mut self, data: &Dataset, idx: &[usize]) -> Result<f64> {
        let clips: Vec<_> = idx.iter().map(|&i| &data.samples[i].clip).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
        let tsn = &self.config.tsn;
        let mut tape = Tape::new();
        let out = ts_forward(&self.model, &mut tape, &clips, tsn, true, &mut self.rng)?;
        let loss = ts_loss(&mut tape, &out, &labels, tsn.loss, tsn.segments)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        let store = &mut self.model.store;
        for (id, g) in tape.param_grads() {
            store.accumulate_grad(id, g, 1.0)?;
        }
        // Release the tape's references so parameters update in place.
        drop(tape);
        self.adam.step(store, self.scheduler.lr, self.config.train.weight_decay)?;
        store.zero_grad();
        Ok(value)
    }

    /// Fused probabilities in evaluation mode: no dropout, center crops.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        predict_dataset(&self.model, &self.config.tsn, data, self.config.train.batch_size)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Accuracy> {
        let probs = self.predict(data)?;
        let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
        Ok(accuracy(&probs, &labels))
    }

    /// Trains one epoch, evaluates on `val`, updates the schedule and records metrics.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<MetricsRecord> {
        let start = Instant::now();
        let stats = self.train_epoch(train)?;
        let acc = self.evaluate(val)?;
        let lr = self.scheduler.step(acc.top1);
        self.epoch += 1;
        let record = MetricsRecord {
            epoch: self.epoch,
            train_loss: stats.mean_loss,
            top1: acc.top1,
            top5: acc.top5,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(record.clone());
        Ok(record)
    }
}

/// Evaluation-mode fused probabilities for every sample of `data`.
pub fn predict_dataset(model: &Model, tsn: &TsnConfig, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    // Evaluation draws no random numbers; the stream only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probs = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let clips: Vec<_> = chunk.iter().map(|s| &s.clip).collect();
        let mut tape = Tape::new();
        let out = ts_forward(model, &mut tape, &clips, tsn, false, &mut rng)?;
        probs.extend(fused_probabilities(&tape, model, &out));
    }
    Ok(probs)
}

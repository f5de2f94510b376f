//! Minibatch SGD training with step decay, epoch snapshots, and batched
//! (optionally sharded) evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, AugmentationPolicy, DatasetSplit};
use crate::error::{invalid, Error, Result};
use crate::network::Network;
use crate::optim::Sgd;
use crate::seed;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f32,
    pub augmentation: AugmentationPolicy,
    /// Drives shuffling and augmentation; each epoch uses its own stream.
    pub seed: u64,
}

impl TrainHyper {
    /// Momentum 0.9, weight decay 5e-4, ×0.1 at 50% and 75% of the epochs,
    /// pad-crop + flip augmentation sized for `side`.
    pub fn standard(epochs: usize, side: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            augmentation: AugmentationPolicy::for_side(side),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("train", "batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(
                "train",
                format!(
                    "learning rate {} is not a finite non-negative number",
                    self.lr
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(
                "train",
                format!("momentum {} outside [0, 1)", self.momentum),
            ));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid(
                "train",
                "lr milestones must be fractions in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn optimizer(&self) -> Sgd {
        Sgd::new(self.lr, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// One-based: the number of epochs completed.
    pub epoch: usize,
    pub lr: f32,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Running accuracy on the augmented training batches.
    pub accuracy: f64,
}

/// Network and optimizer state after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub network: Network,
    pub optimizer: Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainOutcome {
    pub fn snapshot(&self, epoch: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.epoch == epoch)
    }
}

/// Trains `net` from scratch optimizer state up to `hyper.epochs` total
/// epochs, starting at `net.epoch`.
pub fn train(
    net: &mut Network,
    data: &DatasetSplit,
    hyper: &TrainHyper,
    snapshot_epochs: &[usize],
) -> Result<TrainOutcome> {
    let mut opt = hyper.optimizer();
    train_with(net, &mut opt, data, hyper, snapshot_epochs)
}

/// Continues training with an existing optimizer (e.g. restored from a
/// snapshot). Epoch streams are keyed by absolute epoch, so resuming from a
/// snapshot reproduces the uninterrupted run.
pub fn train_with(
    net: &mut Network,
    opt: &mut Sgd,
    data: &DatasetSplit,
    hyper: &TrainHyper,
    snapshot_epochs: &[usize],
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(invalid("train", "training split is empty"));
    }
    data.ensure_unaugmented("train")?;
    let mut history = Vec::new();
    let mut snapshots = Vec::new();
    let take = |net: &Network, opt: &Sgd, snapshots: &mut Vec<Snapshot>| {
        if snapshot_epochs.contains(&net.epoch) {
            snapshots.push(Snapshot {
                epoch: net.epoch,
                network: net.clone(),
                optimizer: opt.clone(),
            });
        }
    };
    take(net, opt, &mut snapshots);
    while net.epoch < hyper.epochs {
        let stats = run_epoch(net, opt, data, hyper)?;
        history.push(stats);
        take(net, opt, &mut snapshots);
    }
    Ok(TrainOutcome { history, snapshots })
}

fn run_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    data: &DatasetSplit,
    hyper: &TrainHyper,
) -> Result<EpochStats> {
    let epoch = net.epoch;
    let mut rng = seed::rng(hyper.seed, 0x7a1e_0000 + epoch as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    opt.lr = hyper.lr_at(epoch);
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
        let batch = augment(&data.subset(idx)?, &hyper.augmentation, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let pass = net.forward_train(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
        let value = tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                loss: value,
            });
        }
        loss_sum += value as f64 * idx.len() as f64;
        correct += tape
            .value(pass.logits)
            .argmax_rows()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        tape.backward(loss)?;
        net.accumulate_grads(&tape, &pass)?;
        opt.step(net.params_mut())?;
    }
    net.epoch += 1;
    Ok(EpochStats {
        epoch: net.epoch,
        lr: opt.lr,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Eval-mode predictions, batched.
pub fn predict(net: &Network, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        out.extend(net.predict(&images.select(0, &idx)?)?);
    }
    Ok(out)
}

pub fn correct_count(net: &Network, data: &DatasetSplit) -> Result<usize> {
    Ok(predict(net, &data.images)?
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count())
}

/// Fraction of samples whose eval-mode argmax equals the label.
pub fn evaluate(net: &Network, data: &DatasetSplit) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluate", "split is empty"));
    }
    Ok(correct_count(net, data)? as f64 / data.len() as f64)
}

/// [`evaluate`] with contiguous shards on `workers` threads; per-shard
/// integer counts are summed, so the result equals the single-threaded one.
pub fn evaluate_sharded(net: &Network, data: &DatasetSplit, workers: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluate", "split is empty"));
    }
    let workers = workers.clamp(1, data.len());
    let per = data.len().div_ceil(workers);
    let counts: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let shard = data.range(w * per, (w + 1) * per);
                s.spawn(move || {
                    if shard.is_empty() {
                        Ok(0)
                    } else {
                        correct_count(net, &shard)
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut total = 0;
    for c in counts {
        total += c?;
    }
    Ok(total as f64 / data.len() as f64)
}

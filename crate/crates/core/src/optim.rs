//! Plain SGD with weight decay under a warm-restart cosine schedule.
//!
//! The schedule is measured in (fractional) epochs within one task and
//! restarts at every task. After a linear warm-up from `lr_min` to `lr_max`,
//! cosine cycles of length `T0, T0·T_mult, T0·T_mult², …` follow, each
//! starting at `lr_max` and decaying towards `lr_min`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dynnan::{gather_rows, mix_batch, DynNan};
use crate::error::{Error, Result};
use crate::memory::TrainingSet;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the first cosine cycle, in epochs.
    pub t0: f64,
    pub t_mult: f64,
    pub warmup_epochs: f64,
    pub epochs_per_task: usize,
    pub mix_prob: f64,
    pub mix_strength: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            weight_decay: 1e-4,
            lr_max: 0.005,
            lr_min: 5e-5,
            t0: 1.0,
            t_mult: 2.0,
            warmup_epochs: 1.0,
            // warm-up + cycles of 1, 2, 4, 8 and 16 epochs
            epochs_per_task: 32,
            mix_prob: 0.5,
            mix_strength: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_min < lr_max");
        }
        if !(self.t0 >= 1.0 && self.t_mult >= 1.0) {
            return bad("t0 and t_mult must be at least 1");
        }
        if !(self.warmup_epochs >= 0.0 && self.weight_decay >= 0.0) {
            return bad("warmup_epochs and weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mix_prob) || self.mix_strength.is_nan() || self.mix_strength <= 0.0 {
            return bad("mix_prob must be in [0, 1] and mix_strength positive");
        }
        Ok(())
    }

    /// Epochs at which a cosine cycle starts, within the task's epoch budget.
    pub fn cycle_starts(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let (mut start, mut len) = (self.warmup_epochs, self.t0);
        while start < self.epochs_per_task as f64 {
            out.push(start);
            start += len;
            len *= self.t_mult;
        }
        out
    }
}

/// Learning rate at fractional `epoch` of the current task.
pub fn lr_at(config: &OptimConfig, epoch: f64) -> Result<f64> {
    let limit = config.epochs_per_task as f64;
    if !(0.0..limit).contains(&epoch) {
        return Err(Error::Schedule { epoch, limit });
    }
    let span = config.lr_max - config.lr_min;
    if epoch < config.warmup_epochs {
        return Ok(config.lr_min + span * epoch / config.warmup_epochs);
    }
    let mut t_cur = epoch - config.warmup_epochs;
    let mut len = config.t0;
    while t_cur >= len {
        t_cur -= len;
        len *= config.t_mult;
    }
    // Written as a decrement from lr_max so that a restart returns lr_max exactly.
    Ok(config.lr_max - span * 0.5 * (1.0 - (PI * t_cur / len).cos()))
}

pub fn sgd_step(model: &mut DynNan<f32>, grads: &crate::dynnan::Gradients<f32>, lr: f64) -> Result<()> {
    model.sgd_step(grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Re-initialize every parameter before each task.
    #[default]
    Scratch,
    /// Continue from the previous task's weights.
    #[serde(rename = "finetune")]
    FineTune,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Scratch => "scratch",
            Strategy::FineTune => "finetune",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Strategy::Scratch),
            "finetune" | "fine-tune" => Ok(Strategy::FineTune),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Sample-weighted mean mini-batch loss of each epoch, decay term included.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains `model` on the buffer contents for one task.
///
/// Randomness comes from streams derived from `(seed, task)`, so a task's
/// training is reproducible on its own.
pub fn train_task(
    model: &mut DynNan<f32>,
    set: &TrainingSet,
    config: &OptimConfig,
    strategy: Strategy,
    seed: u64,
    task: usize,
) -> Result<TrainReport> {
    train_task_observed(model, set, config, strategy, seed, task, |_, _| Ok(()))
}

/// [`train_task`] with a callback after every epoch, given the epoch index
/// and the current model.
pub fn train_task_observed(
    model: &mut DynNan<f32>,
    set: &TrainingSet,
    config: &OptimConfig,
    strategy: Strategy,
    seed: u64,
    task: usize,
    mut on_epoch: impl FnMut(usize, &DynNan<f32>) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if strategy == Strategy::Scratch {
        model.reinitialize(seed::derive(seed, Stream::Init, task as u64));
    }
    let columns = set
        .labels()
        .iter()
        .map(|&label| {
            model
                .column_of(label)
                .ok_or_else(|| Error::Label(format!("class {label} has no output column")))
        })
        .collect::<Result<Vec<_>>>()?;
    if set.dim() != model.input_dim() && !set.is_empty() {
        return Err(Error::Shape { expected: model.input_dim(), actual: set.dim() });
    }
    let mut report = TrainReport::default();
    if config.epochs_per_task == 0 {
        return Ok(report);
    }
    if set.is_empty() {
        return Err(Error::Data("cannot train on an empty memory buffer".into()));
    }

    let mut shuffle_rng = seed::derived_rng(seed, Stream::Shuffle, task as u64);
    let mut mix_rng = seed::derived_rng(seed, Stream::Mix, task as u64);
    let n = set.len();
    let batches = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs_per_task {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let lr = lr_at(config, epoch as f64 + b as f64 / batches as f64)?;
            let x = gather_rows(set.features(), set.dim(), rows);
            let cols = rows.iter().map(|&r| columns[r]).collect();
            let (x, targets) = mix_batch(x, cols, config.mix_prob, config.mix_strength, &mut mix_rng)?;
            let (loss, grads) = model.loss_and_grad(x.view(), &targets, config.weight_decay)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite loss in epoch {epoch}")));
            }
            model.sgd_step(&grads, lr)?;
            total += loss * rows.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(total / n as f64);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

/// Mean cross-entropy of `model` on a training set, without mixing or decay.
pub fn dataset_loss(model: &DynNan<f32>, set: &TrainingSet) -> Result<f64> {
    let columns = set
        .labels()
        .iter()
        .map(|&l| model.column_of(l).ok_or_else(|| Error::Label(format!("class {l} has no output column"))))
        .collect::<Result<Vec<_>>>()?;
    let x = ArrayView2::from_shape((set.len(), set.dim()), set.features())
        .map_err(|e| Error::Data(e.to_string()))?;
    let (loss, _) = model.loss_and_grad(x, &crate::dynnan::Targets::plain(columns), 0.0)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restart_is_exactly_lr_max() {
        let c = OptimConfig::default();
        for start in c.cycle_starts() {
            assert_eq!(lr_at(&c, start).unwrap(), 0.005);
        }
    }

    #[test]
    fn warmup_ramp() {
        let c = OptimConfig::default();
        assert_eq!(lr_at(&c, 0.0).unwrap(), 5e-5);
        assert!((lr_at(&c, 0.5).unwrap() - (5e-5 + 0.005) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_of_second_cycle() {
        // second cycle spans [2, 4); its midpoint is epoch 3
        let c = OptimConfig::default();
        assert!((lr_at(&c, 3.0).unwrap() - 0.002525).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_epochs() {
        let c = OptimConfig::default();
        assert!(matches!(lr_at(&c, 32.0), Err(Error::Schedule { .. })));
        assert!(matches!(lr_at(&c, -0.1), Err(Error::Schedule { .. })));
    }

    #[test]
    fn default_config_is_valid() {
        OptimConfig::default().validate().unwrap();
        let bad = OptimConfig { lr_min: 0.01, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs() {
        let set = TrainingSet::from_pairs(2, [([1.0f32, 0.0].as_slice(), 0u16)]).unwrap();
        let config = OptimConfig { epochs_per_task: 0, ..Default::default() };
        let mut m = DynNan::<f32>::with_hidden(2, [3, 3], &[0], 1).unwrap();
        let before = m.clone();
        train_task(&mut m, &set, &config, Strategy::FineTune, 0, 1).unwrap();
        assert_eq!(m, before);
        train_task(&mut m, &set, &config, Strategy::Scratch, 0, 1).unwrap();
        let expected = DynNan::<f32>::with_hidden(2, [3, 3], &[0], seed::derive(0, Stream::Init, 1)).unwrap();
        assert_eq!(m, expected);
    }

    #[test]
    fn label_outside_class_map() {
        let set = TrainingSet::from_pairs(2, [([1.0f32, 0.0].as_slice(), 5u16)]).unwrap();
        let mut m = DynNan::<f32>::with_hidden(2, [3, 3], &[0], 1).unwrap();
        let r = train_task(&mut m, &set, &OptimConfig::default(), Strategy::FineTune, 0, 1);
        assert!(matches!(r, Err(Error::Label(_))));
    }
}

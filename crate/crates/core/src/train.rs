//! Mini-batch training with masking augmentation, Adam, a plateau learning
//! rate schedule, warm-up and early stopping on validation loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::auc;
use crate::missingness::augment_sample;
use crate::model::{logits, loss_and_gradients, AttentionKind, Batch, NaimParameters};
use crate::seed::{label_seed, rng_from};
use crate::tensor::{adam_step, AdamConfig, AdamState};

/// Smallest validation-loss decrease that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Rows per forward pass when scoring a whole dataset.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub plateau_window: usize,
    pub lr_drop_factor: f64,
    pub initial_lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub augmentation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1500,
            batch_size: 32,
            patience: 50,
            warmup_epochs: 50,
            plateau_window: 25,
            lr_drop_factor: 10.0,
            initial_lr: 1e-3,
            l1: 0.0,
            l2: 0.0,
            augmentation: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive".into());
        }
        if self.patience == 0 || self.warmup_epochs == 0 || self.plateau_window == 0 {
            return bad("patience, warmup_epochs and plateau_window must be positive".into());
        }
        if !(self.lr_drop_factor > 1.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must exceed 1, got {}", self.lr_drop_factor));
        }
        for (name, v) in [("initial_lr", self.initial_lr), ("l1", self.l1), ("l2", self.l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` after `window` consecutive
/// non-improving observations. Improvements reset the count, as does a drop.
#[derive(Clone, Debug, PartialEq)]
pub struct LrPlateau {
    lr: f64,
    window: usize,
    factor: f64,
    best: f64,
    stagnant: usize,
    drops: usize,
}

impl LrPlateau {
    pub fn new(lr: f64, window: usize, factor: f64) -> Self {
        Self { lr, window, factor, best: f64::INFINITY, stagnant: 0, drops: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn drops(&self) -> usize {
        self.drops
    }

    /// Feeds one validation loss and returns the learning rate for the next
    /// epoch. While `frozen` the stagnation count does not advance.
    pub fn observe(&mut self, val_loss: f64, frozen: bool) -> f64 {
        if val_loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = val_loss;
            self.stagnant = 0;
        } else if !frozen {
            self.stagnant += 1;
            if self.stagnant >= self.window {
                self.lr /= self.factor;
                self.drops += 1;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience counter over validation loss, inactive during warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    warmup: usize,
    best: f64,
    stagnant: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, warmup: usize) -> Self {
        Self { patience, warmup, best: f64::INFINITY, stagnant: 0 }
    }

    pub fn stagnant(&self) -> usize {
        self.stagnant
    }

    /// `epoch` is 1-based; epochs `1..=warmup` never count as stagnant.
    pub fn observe(&mut self, val_loss: f64, epoch: usize) -> StopDecision {
        if val_loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = val_loss;
            self.stagnant = 0;
        } else if epoch > self.warmup {
            self.stagnant += 1;
        }
        if self.stagnant >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when the validation split holds a single class.
    pub val_auc: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Samples the augmentation coin chose to mask.
    pub augmented_samples: usize,
    /// Cells hidden by augmentation.
    pub masked_cells: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned snapshot.
    pub best_epoch: usize,
    pub lr_drops: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc,lr,augmented_samples,masked_cells\n");
        for r in &self.epochs {
            let auc = r.val_auc.map(|a| format!("{a:.17e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{},{:e},{},{}",
                r.epoch, r.train_loss, r.val_loss, auc, r.lr, r.augmented_samples, r.masked_cells
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub params: NaimParameters,
    pub history: TrainHistory,
}

/// Mean cross-entropy and class probabilities of every row of `data`.
pub fn score_dataset(params: &NaimParameters, data: &TabularDataset) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = data.n_features();
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(data.n_samples());
    for start in (0..data.n_samples()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.n_samples());
        let batch = Batch {
            values: &data.values()[start * m..end * m],
            present: &data.present()[start * m..end * m],
            n: end - start,
        };
        let z = logits(params, batch, AttentionKind::Double)?;
        for (r, &label) in data.labels()[start..end].iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += max + sum.ln() - row[label];
            probs.push(row.iter().map(|v| (v - max).exp() / sum).collect());
        }
    }
    if data.n_samples() == 0 {
        return Err(Error::Contract("cannot score an empty dataset".into()));
    }
    Ok((total / data.n_samples() as f64, probs))
}

/// Positive-class (index 1) probabilities.
pub fn positive_scores(probs: &[Vec<f64>]) -> Vec<f64> {
    probs.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect()
}

fn binary_auc(probs: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    auc(&positive_scores(probs), labels).ok()
}

pub fn train(params: NaimParameters, train_set: &TabularDataset, val_set: &TabularDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(params, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `observe` after every epoch.
pub fn train_with_observer(
    mut params: NaimParameters,
    train_set: &TabularDataset,
    val_set: &TabularDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.n_samples() == 0 || val_set.n_samples() == 0 {
        return Err(Error::Contract("training and validation splits must be non-empty".into()));
    }
    let m = train_set.n_features();
    if m != params.tokens().len() || val_set.n_features() != m {
        return Err(Error::shape(
            "train",
            format!("model has {} tokens, data {m} / {} features", params.tokens().len(), val_set.n_features()),
        ));
    }
    let mut adam = AdamState::with_frozen_rows(params.tensors(), params.frozen_rows(), AdamConfig::default());
    let mut plateau = LrPlateau::new(cfg.initial_lr, cfg.plateau_window, cfg.lr_drop_factor);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.warmup_epochs);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, NaimParameters)> = None;
    let (shuffle_label, augment_label) = (label_seed("shuffle"), label_seed("augment"));

    let mut order: Vec<usize> = (0..train_set.n_samples()).collect();
    let mut values = Vec::with_capacity(cfg.batch_size * m);
    let mut present = Vec::with_capacity(cfg.batch_size * m);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr();
        order.sort_unstable();
        order.shuffle(&mut rng_from(&[cfg.seed, shuffle_label, epoch as u64]));
        let (mut loss_sum, mut augmented, mut masked) = (0.0, 0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            values.clear();
            present.clear();
            labels.clear();
            for &i in chunk {
                values.extend_from_slice(train_set.row_values(i));
                if cfg.augmentation {
                    let mut rng = rng_from(&[cfg.seed, augment_label, epoch as u64, i as u64]);
                    let (mask, aug) = augment_sample(train_set.row_present(i), &mut rng);
                    augmented += usize::from(aug.applied);
                    masked += aug.masked;
                    present.extend(mask);
                } else {
                    present.extend_from_slice(train_set.row_present(i));
                }
                labels.push(train_set.labels()[i]);
            }
            let batch = Batch { values: &values, present: &present, n: chunk.len() };
            let training_error = |msg: String| Error::Training { epoch, batch: b, msg };
            let (loss, grads) = loss_and_gradients(&params, batch, &labels).map_err(|e| training_error(e.to_string()))?;
            if !loss.is_finite() {
                return Err(training_error(format!("loss is {loss}")));
            }
            adam_step(params.tensors_mut(), &grads, &mut adam, lr, cfg.l2, cfg.l1)
                .map_err(|e| training_error(e.to_string()))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_loss, val_probs) = score_dataset(&params, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Training { epoch, batch: 0, msg: format!("validation loss is {val_loss}") });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.n_samples() as f64,
            val_loss,
            val_auc: binary_auc(&val_probs, val_set.labels()),
            lr,
            augmented_samples: augmented,
            masked_cells: masked,
        };
        observe(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
        }
        plateau.observe(val_loss, epoch <= cfg.warmup_epochs);
        if stopper.observe(val_loss, epoch) == StopDecision::Stop {
            history.stopped_early = true;
            break;
        }
    }
    history.lr_drops = plateau.drops();
    let (_, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params, history })
}

//! Optimization: AdamW, a warmup + cosine schedule, and the epoch loop.

use std::f64::consts::PI;
use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / (warmup_steps + 1) as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One AdamW update of a single tensor. `step` counts from 1.
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != moments.m.shape() {
        return Err(Error::Contract(format!(
            "AdamW shapes disagree: param {:?}, grad {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            moments.m.shape()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let wd = if decay { lr * cfg.weight_decay } else { 0.0 };
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *p -= wd * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW state across a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        OptimState {
            config,
            step: 0,
            moments: params
                .iter()
                .map(|(n, p)| {
                    let z = Tensor::zeros(p.value.shape());
                    (n.to_string(), Moments { m: z.clone(), v: z })
                })
                .collect(),
        }
    }

    /// Updates every parameter that has a gradient and is not frozen. Weight
    /// decay applies to weight matrices and kernels only.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
        frozen: impl Fn(&str, ParamKind) -> bool,
    ) -> Result<()> {
        if let Some(name) = grads.keys().find(|n| !params.contains(n)) {
            return Err(Error::Contract(format!("gradient for unknown parameter `{name}`")));
        }
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if frozen(name, p.kind) {
                continue;
            }
            let moments = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no optimizer state for `{name}`")))?;
            adamw_update(&mut p.value, g, moments, self.step, lr, &self.config, p.kind.decays())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep every attention temperature fixed.
    #[serde(default)]
    pub freeze_beta: bool,
    /// Stop after the first epoch whose train accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_acc: Option<f64>,
    /// Optimizer steps per epoch cap, for quick fine-tuning runs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_weight_decay() -> f64 {
    AdamWConfig::default().weight_decay
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be finite and non-negative, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,val_acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.epoch, r.loss, r.train_acc, val, r.lr).expect("string write");
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Loss, accuracy and parameter gradients of one batch in train mode.
pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: IndexMap<String, Tensor>,
    pub bn_stats: Vec<(String, crate::tensor::BatchStats)>,
}

pub fn compute_step(model: &Model, images: &Tensor, labels: &[usize]) -> Result<StepResult> {
    let tape = Tape::new();
    let out = model.forward(&tape, tape.constant(images.clone()), &ForwardOptions::train())?;
    let loss = out.logits.cross_entropy(labels)?;
    let correct = count_correct(&out.logits.to_tensor(), labels);
    let grads = tape.backward(loss)?;
    let loss_value = loss.to_tensor().item();
    let param_grads = out
        .params
        .iter()
        .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
        .collect();
    let bn_stats = out.record.bn_stats;
    Ok(StepResult {
        loss: loss_value,
        correct,
        grads: param_grads,
        bn_stats,
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode accuracy over a dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        correct += count_correct(&model.predict(&images)?, &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    recipe: &TrainRecipe,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if train.classes() > model.config().num_classes {
        return Err(Error::input(format!(
            "dataset has {} classes but the model predicts {}",
            train.classes(),
            model.config().num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut optim = OptimState::new(recipe.adamw(), model.params());
    let batches_per_epoch = train.len().div_ceil(recipe.batch_size);
    let steps_per_epoch = recipe.max_steps.map_or(batches_per_epoch, |m| m.min(batches_per_epoch));
    let total_steps = steps_per_epoch * recipe.epochs;
    let warmup_steps = steps_per_epoch * recipe.warmup_epochs;
    let freeze = recipe.freeze_beta;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(recipe.batch_size).take(steps_per_epoch) {
            let (images, labels) = train.batch(chunk);
            let result = compute_step(model, &images, &labels)?;
            lr = cosine_lr(step, total_steps, recipe.base_lr, warmup_steps);
            optim.step(model.params_mut(), &result.grads, lr, |_, kind| {
                freeze && kind == ParamKind::Temperature
            })?;
            model.apply_bn_stats(&result.bn_stats)?;
            loss_sum += result.loss * chunk.len() as f64;
            correct += result.correct;
            seen += chunk.len();
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc: val.map(|v| evaluate(model, v, recipe.batch_size)).transpose()?,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if let Some(target) = recipe.stop_at_train_acc {
            if record.train_acc >= target {
                break;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(5, 105, 0.1, 5), 0.1);
        assert_eq!(cosine_lr(105, 105, 0.1, 5), 0.0);
        assert!((cosine_lr(55, 105, 0.1, 5) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0, 105, 0.1, 5) > 0.0);
        assert!(cosine_lr(4, 105, 0.1, 5) < 0.1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut mom = Moments {
            m: Tensor::zeros(&[3]),
            v: Tensor::zeros(&[3]),
        };
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(&mut p, &Tensor::zeros(&[3]), &mut mom, 1, 0.1, &cfg, true).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut mom = Moments {
            m: Tensor::zeros(&[2]),
            v: Tensor::zeros(&[2]),
        };
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = Tensor::new(&[2], vec![0.3, -7.0]).unwrap();
        adamw_update(&mut p, &g, &mut mom, 1, 0.01, &cfg, false).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut mom = Moments {
            m: Tensor::zeros(&[2]),
            v: Tensor::zeros(&[2]),
        };
        let r = adamw_update(&mut p, &Tensor::zeros(&[3]), &mut mom, 1, 0.1, &AdamWConfig::default(), true);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn csv_has_header_and_one_row_per_epoch() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                loss: 0.5,
                train_acc: 0.75,
                val_acc: None,
                lr: 0.001,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,loss,train_acc,val_acc,lr\n1,0.5,0.75,,0.001\n");
    }
}

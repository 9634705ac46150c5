use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::MqarInstance;
use crate::error::{Error, Result};
use crate::rng::{rng_from, sub_seed};
use crate::training::model::{backward, forward_loss, Model};
use crate::training::optim::{lr_at, AdamW};

/// `k` learning rates log-spaced from `lo` to `hi` inclusive.
pub fn lr_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => vec![],
        1 => vec![lo],
        _ => (0..k).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lrs: lr_grid(1e-4, 1e-2, 4),
            epochs: 64,
            batch_size: 64,
            weight_decay: 0.1,
            warmup: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            train_size: 10_000,
            test_size: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("batch and dataset sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::config(format!("warmup fraction {} outside [0, 1]", self.warmup)));
        }
        if self.lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub init_test_acc: f64,
    pub history: Vec<EpochStats>,
    /// Set when a non-finite loss stopped the run.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn best_test_acc(&self) -> f64 {
        self.history.iter().map(|h| h.test_acc).fold(self.init_test_acc, f64::max)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.train_loss)
    }
}

const EVAL_BATCH: usize = 256;

/// Mean loss and label accuracy over `data`.
pub fn evaluate(model: &Model, data: &[MqarInstance]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut labels) = (0.0, 0usize, 0usize);
    for batch in data.chunks(EVAL_BATCH) {
        let out = forward_loss(model, batch)?;
        loss += out.loss * out.targets.len() as f64;
        correct += out.correct;
        labels += out.targets.len();
    }
    if labels == 0 {
        return Err(Error::invalid("evaluation set has no labels"));
    }
    Ok((loss / labels as f64, correct as f64 / labels as f64))
}

/// Trains at one learning rate. Deterministic given the model, data and config.
pub fn train(mut model: Model, train: &[MqarInstance], test: &[MqarInstance], cfg: &TrainConfig, lr: f64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let init_test_acc = evaluate(&model, test)?.1;
    let mut opt = AdamW::new(&model, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = rng_from(sub_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<MqarInstance> = idx.iter().map(|&i| train[i].clone()).collect();
            let (out, grads) = backward(&model, &batch)?;
            if !out.loss.is_finite() || !grads.is_finite() {
                history.push(EpochStats { epoch, train_loss: f64::NAN, test_acc: f64::NAN });
                return Ok(TrainOutcome { model, init_test_acc, history, diverged: true });
            }
            loss_sum += out.loss;
            opt.update(&mut model, &grads, lr_at(lr, step, total, cfg.warmup));
            step += 1;
        }
        let test_acc = evaluate(&model, test)?.1;
        history.push(EpochStats { epoch, train_loss: loss_sum / steps_per_epoch as f64, test_acc });
    }
    Ok(TrainOutcome { model, init_test_acc, history, diverged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, GenConfig};
    use crate::training::model::{ModelSpec, Variant};

    fn split(n: usize, train: usize, test: usize) -> (Vec<MqarInstance>, Vec<MqarInstance>) {
        let mut cfg = GenConfig::new(n, 2, 0.1, 16, 3);
        cfg.num_examples = train + test;
        let mut all = gen_dataset(&cfg).unwrap();
        let test = all.split_off(train);
        (all, test)
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = lr_grid(1e-4, 1e-2, 4);
        assert_eq!(g.len(), 4);
        assert!((g[0] - 1e-4).abs() < 1e-18 && (g[3] - 1e-2).abs() < 1e-15);
        assert!((g[1] / g[0] - g[2] / g[1]).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (tr, te) = split(16, 16, 8);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let m = Model::init(ModelSpec::new(Variant::BaseConv, 16, 8, 16), 1).unwrap();
        let out = train(m.clone(), &tr, &te, &cfg, 0.0).unwrap();
        assert_eq!(out.model.params, m.params);
        assert!(out.history.iter().all(|h| h.test_acc == out.init_test_acc));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (tr, te) = split(16, 64, 16);
        let cfg = TrainConfig { epochs: 5, batch_size: 16, ..Default::default() };
        let m = Model::init(ModelSpec::new(Variant::Attention, 16, 16, 16), 2).unwrap();
        let a = train(m.clone(), &tr, &te, &cfg, 3e-3).unwrap();
        let b = train(m, &tr, &te, &cfg, 3e-3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    }
}

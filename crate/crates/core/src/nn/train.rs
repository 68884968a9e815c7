//! Mini-batch training with early stopping, and noisy evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Model, PassOptions};
use super::optim::{Optimizer, OptimizerKind};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::noise::{mean_std, InjectionPlan};
use crate::rng::{Domain, RngStream};
use crate::tensor::Real;

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 500;

/// Offset separating validation-pass noise streams from test evaluation.
const VAL_EPOCH_BASE: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub clamp_weights: bool,
    /// Epochs without validation improvement before stopping; `0` disables
    /// early stopping.
    pub patience: usize,
    /// Smallest validation-accuracy gain that counts as improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            clamp_weights: false,
            patience: 5,
            min_delta: 0.001,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidArgument("min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Validation accuracy per epoch (empty without a validation set).
    pub val_accuracy: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Sample standard deviation across repeats; 0 for one repeat.
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

/// Trains `model` in place. Noise streams are `(seed, Noise)` at
/// `(run, epoch, batch)`; shuffling uses `(seed, Shuffle)` at
/// `(run, epoch)`. With a validation set, the parameters of the best
/// validation epoch are restored at the end.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    plan: Option<&InjectionPlan>,
    cfg: &TrainConfig,
    run: u32,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let e = epoch as u32;
        order.shuffle(&mut RngStream::new(cfg.seed, Domain::Shuffle).run(run).epoch(e).generator());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.gather::<T>(idx);
            let rng = RngStream::noise(cfg.seed).run(run).epoch(e).batch(b as u32);
            loss_sum += model.backward_and_step(&x, &y, plan, rng, &mut optimizer, cfg.clamp_weights)?;
            batches += 1;
        }
        report.losses.push(loss_sum / batches as f64);
        report.epochs_run = epoch + 1;

        let Some(val) = val_set else {
            report.best_epoch = epoch;
            continue;
        };
        let rng = RngStream::new(cfg.seed, Domain::Eval).run(run).epoch(VAL_EPOCH_BASE + e);
        let acc = accuracy_once(model, val, &PassOptions::eval(plan, rng))?;
        report.val_accuracy.push(acc);
        log::debug!("run {run} epoch {epoch}: loss {:.4} val {:.4}", report.losses[epoch], acc);
        match &best {
            Some((b, _)) if acc < b + cfg.min_delta => {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((acc, model.clone()));
                report.best_epoch = epoch;
                stale = 0;
            }
        }
    }
    if let Some((acc, m)) = best {
        *model = m;
        report.best_val_accuracy = Some(acc);
    }
    Ok(report)
}

fn accuracy_once<T: Real>(model: &Model<T>, ds: &Dataset, opts: &PassOptions<'_, T>) -> Result<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for (b, idx) in all.chunks(EVAL_BATCH).enumerate() {
        let (x, y) = ds.gather::<T>(idx);
        let pass = PassOptions {
            rng: opts.rng.batch(b as u32),
            ..*opts
        };
        let out = model.run(&x, &pass, false)?;
        correct += Model::predict(&out.logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean accuracy and its spread over `repeats` noisy passes. Repeat `r` uses
/// `rng` at epoch `r` and batch `b`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    plan: Option<&InjectionPlan>,
    rng: RngStream,
    repeats: usize,
) -> Result<Evaluation> {
    evaluate_with(model, ds, &PassOptions::eval(plan, rng), repeats)
}

/// [`evaluate`] with full pass options (repetition plans, hooks).
pub fn evaluate_with<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    opts: &PassOptions<'_, T>,
    repeats: usize,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let stochastic = opts.plan.is_some_and(|p| p.active(opts.training) && !p.spec.is_zero());
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        if !stochastic && r > 0 {
            per_repeat.push(per_repeat[0]);
            continue;
        }
        let pass = PassOptions {
            rng: opts.rng.epoch(r as u32),
            ..*opts
        };
        per_repeat.push(accuracy_once(model, ds, &pass)?);
    }
    let (accuracy, std) = mean_std(&per_repeat);
    Ok(Evaluation {
        accuracy,
        std,
        per_repeat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_gaussian_blobs;
    use crate::nn::spec::{LayerKind, ModelSpec};
    use crate::nn::model::build_model;
    use crate::noise::{NoiseSpec, Phase};

    fn linear_spec(dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "linear".into(),
            input: [1, 1, dim],
            classes,
            layers: vec![
                LayerKind::Flatten,
                LayerKind::FullyConnected {
                    inputs: dim,
                    outputs: classes,
                },
            ],
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let ds = synthetic_gaussian_blobs(2, 200, 8, 10.0, 4).unwrap();
        let mut model = build_model::<f32>(&linear_spec(8, 2), 1).unwrap();
        // 400 rows / 16 = 25 steps per epoch, 2 epochs = 50 steps
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, None, None, &cfg, 0).unwrap();
        let ev = evaluate(&model, &ds, None, RngStream::new(0, Domain::Eval), 1).unwrap();
        assert!(ev.accuracy > 0.99, "{ev:?}");
    }

    #[test]
    fn indistinguishable_classes_stay_near_chance() {
        let ds = synthetic_gaussian_blobs(4, 250, 8, 0.0, 5).unwrap();
        let test = synthetic_gaussian_blobs(4, 250, 8, 0.0, 6).unwrap();
        let mut model = build_model::<f32>(&linear_spec(8, 4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, None, None, &cfg, 0).unwrap();
        let ev = evaluate(&model, &test, None, RngStream::new(0, Domain::Eval), 1).unwrap();
        assert!((ev.accuracy - 0.25).abs() < 0.06, "{ev:?}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = synthetic_gaussian_blobs(3, 60, 6, 2.0, 1).unwrap();
        let spec = ModelSpec::mlp([1, 1, 6], 3, true);
        let plan = InjectionPlan::global(NoiseSpec::additive(0.3).unwrap(), Phase::TrainAndInference);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let mut a = build_model::<f32>(&spec, 2).unwrap();
        let mut b = build_model::<f32>(&spec, 2).unwrap();
        let ra = train(&mut a, &ds, Some(&ds), Some(&plan), &cfg, 0).unwrap();
        let rb = train(&mut b, &ds, Some(&ds), Some(&plan), &cfg, 0).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn early_stopping_restores_best() {
        let ds = synthetic_gaussian_blobs(3, 50, 6, 3.0, 1).unwrap();
        let mut model = build_model::<f32>(&linear_spec(6, 3), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            patience: 2,
            min_delta: 0.5,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, Some(&ds), None, &cfg, 0).unwrap();
        // improvement of half the accuracy range never repeats
        assert_eq!(report.epochs_run, 3);
        assert_eq!(report.best_epoch, 0);
        let ev = evaluate(&model, &ds, None, RngStream::new(0, Domain::Eval), 1).unwrap();
        assert_eq!(Some(ev.accuracy), report.best_val_accuracy);
    }

    #[test]
    fn evaluation_contract() {
        let ds = synthetic_gaussian_blobs(10, 100, 16, 0.0, 3).unwrap();
        let model = build_model::<f32>(&linear_spec(16, 10), 9).unwrap();
        let rng = RngStream::new(0, Domain::Eval);
        let ev = evaluate(&model, &ds, None, rng, 4).unwrap();
        assert_eq!(ev.std, 0.0);
        assert!((ev.accuracy - 0.1).abs() < 0.02, "{ev:?}");

        let zero = InjectionPlan::global(NoiseSpec::additive(0.0).unwrap(), Phase::TrainAndInference);
        let ev0 = evaluate(&model, &ds, Some(&zero), rng, 3).unwrap();
        assert_eq!(ev0.accuracy, ev.accuracy);

        let noisy = InjectionPlan::global(NoiseSpec::additive(1.0).unwrap(), Phase::TrainAndInference);
        let ev1 = evaluate(&model, &ds, Some(&noisy), rng, 3).unwrap();
        assert!(ev1.std > 0.0);

        let empty = ds.select(&[], ds.split);
        assert!(matches!(evaluate(&model, &empty, None, rng, 1), Err(Error::EmptyDataset)));
        assert!(evaluate(&model, &ds, None, rng, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok }.validate().is_err());
    }
}

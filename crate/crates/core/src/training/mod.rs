//! Detector training: SGD on softmax cross-entropy with plateau learning-rate
//! decay, early stopping on validation accuracy and best-weight restoration.

mod checkpoint;
mod sweep;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_history, save_checkpoint, write_history, CheckpointMeta,
};
pub use sweep::{
    filter_variants, point_hash, read_sweep_index, run_sweep, SweepGrid, SweepOutcome, SweepPoint, SweepRecord,
    SweepStatus, SWEEP_INDEX,
};

use crate::data::{DomainDataset, LabeledPatch, Split};
use crate::detector::{
    argmax_label, build_detector, patches_to_tensor, DetectorConfig, DetectorModel,
};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::seed::{derive, rng, stream};

/// Samples per forward pass when only predictions are needed.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience_epochs: usize,
    pub early_stop_patience: usize,
    pub momentum: f64,
    /// Smallest validation-accuracy increase that counts as an improvement.
    pub min_improvement: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 115,
            batch_size: 128,
            lr_init: 1e-3,
            lr_factor: 0.1,
            lr_patience_epochs: 4,
            early_stop_patience: 10,
            momentum: 0.0,
            min_improvement: 1e-4,
            rng_seed: 22,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::param("max_epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2"));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::param("lr_init", "must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::param("lr_factor", "must lie in (0, 1)"));
        }
        if self.lr_patience_epochs == 0 {
            return Err(Error::param("lr_patience_epochs", "must be at least 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::param("early_stop_patience", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        if self.min_improvement.is_nan() || self.min_improvement < 0.0 {
            return Err(Error::param("min_improvement", "must be non-negative"));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without an improvement of at least `min_delta`.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric and returns the rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric >= self.best + self.min_delta {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Supplies the validation accuracy the schedule and early stopping act on.
/// The default implementation passes the measured value through; scripted
/// signals make schedule behaviour observable in tests.
pub trait ValidationSignal {
    fn validation_accuracy(&mut self, epoch: usize, measured: f64) -> f64;
}

/// Uses the measured validation accuracy.
pub struct MeasuredValidation;

impl ValidationSignal for MeasuredValidation {
    fn validation_accuracy(&mut self, _epoch: usize, measured: f64) -> f64 {
        measured
    }
}

/// Replays a fixed sequence; the last value repeats once it runs out.
pub struct ScriptedValidation(pub Vec<f64>);

impl ValidationSignal for ScriptedValidation {
    fn validation_accuracy(&mut self, epoch: usize, measured: f64) -> f64 {
        self.0
            .get(epoch - 1)
            .or(self.0.last())
            .copied()
            .unwrap_or(measured)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

/// One trained detector.
#[derive(Debug, Clone)]
pub struct DetectorVariant {
    pub variant_id: String,
    pub detector_config: DetectorConfig,
    pub train_config: TrainConfig,
    pub model: DetectorModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were restored.
    pub best_epoch: usize,
    pub source_test_accuracy: f64,
}

/// Eval-mode predictions, batched.
pub fn predict_patches(
    model: &DetectorModel,
    patches: &[&LabeledPatch],
) -> Result<Vec<crate::data::Label>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let logits = model.forward_logits(&patches_to_tensor(chunk)?)?;
        out.extend((0..logits.n).map(|i| argmax_label(logits.sample(i))));
    }
    Ok(out)
}

/// Fraction of patches whose predicted label matches.
pub fn evaluate_accuracy(model: &DetectorModel, patches: &[&LabeledPatch]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::EmptySet("accuracy of an empty patch set"));
    }
    let predictions = predict_patches(model, patches)?;
    let correct = predictions
        .iter()
        .zip(patches)
        .filter(|(p, x)| **p == x.label)
        .count();
    Ok(correct as f64 / patches.len() as f64)
}

pub fn train_detector(
    variant_id: &str,
    detector_config: &DetectorConfig,
    train_config: &TrainConfig,
    source: &DomainDataset,
) -> Result<DetectorVariant> {
    train_detector_with(
        variant_id,
        detector_config,
        train_config,
        source,
        &mut MeasuredValidation,
    )
}

/// [`train_detector`] with an explicit validation signal.
pub fn train_detector_with(
    variant_id: &str,
    detector_config: &DetectorConfig,
    train_config: &TrainConfig,
    source: &DomainDataset,
    signal: &mut dyn ValidationSignal,
) -> Result<DetectorVariant> {
    train_config.validate()?;
    let train = source.split(Split::Train);
    let val = source.split(Split::Val);
    let test = source.split(Split::Test);
    for (split, set) in [("train", &train), ("val", &val), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::InvalidInput(format!(
                "source {split} split is empty"
            )));
        }
    }
    let mut model = build_detector(detector_config)?;
    let mut velocity: Vec<Vec<f64>> = model
        .network
        .params()
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut schedule = PlateauSchedule::new(
        train_config.lr_init,
        train_config.lr_factor,
        train_config.lr_patience_epochs,
        train_config.min_improvement,
    );
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, DetectorModel)> = None;
    let mut stale = 0usize;

    for epoch in 1..=train_config.max_epochs {
        let lr = schedule.lr();
        let epoch_seed = derive(train_config.rng_seed, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut rng(epoch_seed, stream::SHUFFLE),
        );
        let mut dropout_rng = rng(epoch_seed, stream::DROPOUT);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(train_config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&LabeledPatch> = chunk.iter().map(|&i| train[i]).collect();
            let x = patches_to_tensor(&batch)?;
            let targets: Vec<usize> = batch.iter().map(|p| p.label.index()).collect();
            let trace = model
                .network
                .forward_trace(&x, &mut Mode::Train(&mut dropout_rng))?;
            let (loss, grad) = softmax_cross_entropy(&trace.output, &targets);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: format!("loss is {loss}"),
                });
            }
            for (i, &t) in targets.iter().enumerate() {
                if argmax_label(trace.output.sample(i)).index() == t {
                    correct += 1;
                }
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();

            let grads = model.network.backward(&trace, &grad, true, &[]);
            model.network.commit(&trace);
            for ((param, g), v) in model
                .network
                .params_mut()
                .into_iter()
                .zip(&grads.params)
                .zip(&mut velocity)
            {
                for ((w, gi), vi) in param.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = train_config.momentum * *vi + gi;
                    *w -= lr * *vi;
                }
            }
            model.project_constraint();
        }
        if seen == 0 {
            return Err(Error::InvalidInput(
                "train split has fewer than 2 patches".into(),
            ));
        }
        if model
            .network
            .params()
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::TrainingFailure {
                epoch,
                reason: "non-finite weights".into(),
            });
        }

        let measured = evaluate_accuracy(&model, &val)?;
        let val_acc = signal.validation_accuracy(epoch, measured);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy: val_acc,
            lr,
        });
        log::debug!(
            "{variant_id} epoch {epoch}: loss {:.4} val {val_acc:.4} lr {lr:e}",
            loss_sum / seen as f64
        );

        let improved = best
            .as_ref()
            .is_none_or(|(b, _, _)| val_acc >= b + train_config.min_improvement);
        if improved {
            best = Some((val_acc, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        schedule.observe(val_acc);
        if stale >= train_config.early_stop_patience {
            break;
        }
    }

    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    let source_test_accuracy = evaluate_accuracy(&model, &test)?;
    Ok(DetectorVariant {
        variant_id: variant_id.to_string(),
        detector_config: detector_config.clone(),
        train_config: train_config.clone(),
        model,
        history,
        best_epoch,
        source_test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_drops_after_four_stagnant_epochs() {
        let mut s = PlateauSchedule::new(1e-3, 0.1, 4, 1e-4);
        let lrs: Vec<f64> = (0..12).map(|_| s.observe(0.7)).collect();
        // Rate for epoch e + 1 after observing epoch e.
        assert_eq!(lrs[..4], [1e-3; 4]);
        assert!((lrs[4] - 1e-4).abs() < 1e-18);
        assert!((lrs[8] - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn plateau_ignores_sub_threshold_gains() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 2, 1e-4);
        s.observe(0.5);
        s.observe(0.50005);
        assert_eq!(s.observe(0.50009), 0.5);
    }

    #[test]
    fn scripted_signal_repeats_last_value() {
        let mut s = ScriptedValidation(vec![0.1, 0.2]);
        assert_eq!(s.validation_accuracy(1, 0.9), 0.1);
        assert_eq!(s.validation_accuracy(5, 0.9), 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr_factor: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
            TrainConfig {
                early_stop_patience: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

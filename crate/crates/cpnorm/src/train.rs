//! The shared training loop: minibatch SGD-family optimization with the
//! post-step renormalization hook, per-step loss and magnitude recording,
//! and honest divergence reporting.
//!
//! Both initial training and post-compression fine-tuning run through
//! [`train`]; they differ only in configuration.

use crate::data::{batch_iter, Dataset};
use crate::nn::primitives::softmax_cross_entropy;
use crate::nn::Model;
use crate::optim::{post_step_renormalize, OptimKind, Optimizer};
use crate::{Error, Result};

/// Everything a single training run needs beyond the model and data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle (epoch index is folded in, so every epoch
    /// sees a fresh but reproducible order).
    pub seed: u64,
    /// Run the post-step renormalization hook (identity for models without
    /// CP layers).
    pub renormalize: bool,
    /// Stop after this many consecutive epochs without a validation-accuracy
    /// improvement. Requires validation data; `None` disables.
    pub early_stop_patience: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss/accuracy pair for one split at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Metrics recorded at the end of each epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

/// Magnitude state of one CP layer after a given optimizer step (step 0 is
/// the initial state before any update).
#[derive(Debug, Clone)]
pub struct LambdaSample {
    pub step: u64,
    pub sigma: f64,
    pub lambdas: Vec<f64>,
}

/// Per-CP-layer magnitude history, in model layer order.
#[derive(Debug, Clone)]
pub struct LambdaTrajectory {
    pub layer: String,
    pub samples: Vec<LambdaSample>,
}

/// The full record of one training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub epochs: Vec<EpochMetrics>,
    /// Mean minibatch loss per optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub lambda_trajectories: Vec<LambdaTrajectory>,
    /// Set when training stopped on a non-finite loss or gradient instead of
    /// completing; the model holds the last state before the bad update.
    pub diverged: bool,
    /// Human-readable cause when `diverged` is set.
    pub divergence: Option<String>,
    /// Set when early stopping ended the run before the configured epochs.
    pub stopped_early: bool,
}

fn record_lambdas(model: &Model, step: u64, out: &mut Vec<LambdaTrajectory>) {
    for (i, (name, param)) in model.cp_layers().into_iter().enumerate() {
        if out.len() <= i {
            out.push(LambdaTrajectory {
                layer: name.to_string(),
                samples: Vec::new(),
            });
        }
        out[i].samples.push(LambdaSample {
            step,
            sigma: param.sigma,
            lambdas: param.cp.lambdas().to_vec(),
        });
    }
}

/// Confirms the hook's contract: every CP factor column sits on the unit
/// sphere at the start of an epoch.
fn check_unit_columns(model: &Model) -> Result<()> {
    for (name, param) in model.cp_layers() {
        for (mode, factor) in param.cp.factors().iter().enumerate() {
            for r in 0..factor.cols() {
                let mut sq = 0.0;
                for i in 0..factor.rows() {
                    sq += factor.at(i, r) * factor.at(i, r);
                }
                if (sq.sqrt() - 1.0).abs() > 1e-9 {
                    return Err(Error::LayerMismatch {
                        layer: name.to_string(),
                        reason: format!(
                            "factor column (mode {mode}, term {r}) drifted off the unit sphere: norm {}",
                            sq.sqrt()
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Why a training step could not complete.
enum StepFailure {
    /// Numerical blow-up: non-finite loss or gradient, or a factor column
    /// collapsed. The run should stop and report, not error out.
    Diverged(String),
    /// A genuine contract violation (shape mismatch etc.) to propagate.
    Fatal(Error),
}

fn divergence_class(e: Error) -> StepFailure {
    match e {
        Error::NonFinite { .. } | Error::ZeroColumn { .. } => StepFailure::Diverged(e.to_string()),
        other => StepFailure::Fatal(other),
    }
}

/// One forward/backward/update/renormalize cycle on a single batch,
/// returning the batch loss and the number of correct predictions.
fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &crate::data::Batch,
    renormalize: bool,
) -> std::result::Result<(f64, usize), StepFailure> {
    let logits = model.forward(&batch.images, true).map_err(divergence_class)?;
    let (loss, grad) =
        softmax_cross_entropy(&logits, &batch.labels).map_err(divergence_class)?;
    if !loss.is_finite() {
        return Err(StepFailure::Diverged(format!(
            "non-finite training loss ({loss})"
        )));
    }
    let correct = count_correct(&logits, &batch.labels);
    model.zero_grads();
    model.backward(&grad).map_err(divergence_class)?;
    optimizer.step(model).map_err(divergence_class)?;
    if renormalize {
        post_step_renormalize(model).map_err(divergence_class)?;
    }
    Ok((loss, correct))
}

/// Observer invoked after every completed epoch with the live model and that
/// epoch's metrics — the seam callers use to persist progress. An error from
/// the hook aborts the run as a hard failure, never as divergence.
pub type EpochHook<'a> = dyn FnMut(&mut Model, &EpochMetrics) -> Result<()> + 'a;

/// Runs `cfg.epochs` of minibatch training, mutating `model` in place.
///
/// Divergence (a non-finite loss or gradient, or a collapsed factor column)
/// stops the run and is reported on the result rather than papered over; the
/// model retains its state from just before the failed step.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_with_hook(model, train_data, val_data, cfg, None)
}

/// [`train`] with an optional per-epoch observer; an epoch interrupted by
/// divergence is not observed, so the hook only ever sees states that
/// finished an epoch intact.
pub fn train_with_hook(
    model: &mut Model,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut EpochHook>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.early_stop_patience.is_some() && val_data.is_none() {
        return Err(Error::InvalidArgument(
            "early stopping needs validation data".into(),
        ));
    }

    // Factor columns must sit on the unit sphere when training starts; a
    // model loaded from reduced-precision storage is a hair off, so restore
    // the invariant up front. A zero-epoch call leaves the model untouched.
    if cfg.renormalize && cfg.epochs > 0 {
        model.renormalize_cp()?;
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut result = TrainResult {
        epochs: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::new(),
        lambda_trajectories: Vec::new(),
        diverged: false,
        divergence: None,
        stopped_early: false,
    };
    record_lambdas(model, 0, &mut result.lambda_trajectories);

    let mut best_val_acc = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;
    let mut step: u64 = 0;

    'epochs: for epoch in 0..cfg.epochs {
        if cfg.renormalize {
            check_unit_columns(model)?;
        }
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_seen = 0usize;

        let shuffle_seed = cfg.seed.wrapping_add(epoch as u64);
        for batch in batch_iter(train_data, cfg.batch_size, true, shuffle_seed)? {
            let (loss, correct) = match train_step(model, &mut optimizer, &batch, cfg.renormalize)
            {
                Ok(outcome) => outcome,
                Err(StepFailure::Diverged(cause)) => {
                    result.diverged = true;
                    result.divergence = Some(format!("{cause} at step {}", step + 1));
                    break 'epochs;
                }
                Err(StepFailure::Fatal(e)) => return Err(e),
            };
            epoch_correct += correct;
            epoch_seen += batch.labels.len();
            epoch_loss += loss * batch.labels.len() as f64;

            step += 1;
            result.step_losses.push(loss);
            record_lambdas(model, step, &mut result.lambda_trajectories);
        }

        let train_metrics = SplitMetrics {
            loss: epoch_loss / epoch_seen as f64,
            accuracy: epoch_correct as f64 / epoch_seen as f64,
        };
        let val_metrics = match val_data {
            Some(val) => Some(evaluate(model, val, cfg.batch_size)?),
            None => None,
        };
        let epoch_metrics = EpochMetrics {
            epoch,
            train: train_metrics,
            val: val_metrics,
        };
        result.epochs.push(epoch_metrics);
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(model, &epoch_metrics)?;
        }

        if let (Some(patience), Some(val)) = (cfg.early_stop_patience, val_metrics) {
            if val.accuracy > best_val_acc {
                best_val_acc = val.accuracy;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= patience {
                    result.stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    Ok(result)
}

fn count_correct(logits: &DenseTensorRef, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

type DenseTensorRef = crate::tensor::DenseTensor;

/// Single deterministic pass in eval mode (dropout off), returning mean loss
/// and accuracy over the whole dataset.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<SplitMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for batch in batch_iter(data, batch_size, false, 0)? {
        let logits = model.forward(&batch.images, false)?;
        let (loss, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        total_loss += loss * batch.labels.len() as f64;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok(SplitMetrics {
        loss: total_loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::LambdaInit;
    use crate::nn::{LayerSpec, Model, Normalization, WeightInit};
    use crate::tensor::DenseTensor;

    /// 8x1x4x4 toy set where the label is 1 exactly when the top-left pixel
    /// is bright — linearly separable so a couple of epochs must learn it.
    fn toy_dataset(n: usize) -> Dataset {
        let mut data = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let bright = i % 2 == 0;
            for p in 0..16 {
                let base = if p == 0 && bright { 2.0 } else { -0.5 };
                // Deterministic jitter so samples are not exact repeats.
                data.push(base + 0.01 * ((i * 16 + p) % 7) as f64);
            }
            labels.push(usize::from(bright));
        }
        Dataset::new(DenseTensor::new(vec![n, 1, 4, 4], data).unwrap(), labels, "train").unwrap()
    }

    fn toy_model(norm: Normalization, lambda_init: LambdaInit, seed: u64) -> Model {
        Model::build(
            &[1, 4, 4],
            &[
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 16,
                    out_features: 2,
                    normalization: norm,
                    rank: Some(3),
                },
            ],
            WeightInit::KaimingNormal,
            lambda_init,
            seed,
        )
        .unwrap()
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            optimizer: OptimKind::Sgd,
            learning_rate: 0.1,
            epochs: 4,
            batch_size: 4,
            seed: 5,
            renormalize: true,
            early_stop_patience: None,
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let ds = toy_dataset(32);
        let mut model = toy_model(Normalization::Cp, LambdaInit::Ones, 0);
        let before = evaluate(&mut model, &ds, 8).unwrap();
        let result = train(&mut model, &ds, None, &base_config()).unwrap();
        let after = evaluate(&mut model, &ds, 8).unwrap();

        assert!(!result.diverged);
        assert_eq!(result.epochs.len(), 4);
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
        assert!(after.accuracy > 0.9, "accuracy {}", after.accuracy);
    }

    #[test]
    fn lambda_trajectory_starts_at_initial_state_and_tracks_every_step() {
        let ds = toy_dataset(16);
        let mut model = toy_model(Normalization::Cp, LambdaInit::Ones, 1);
        let cfg = TrainConfig {
            epochs: 2,
            ..base_config()
        };
        let result = train(&mut model, &ds, None, &cfg).unwrap();

        assert_eq!(result.lambda_trajectories.len(), 1);
        let traj = &result.lambda_trajectories[0];
        assert_eq!(traj.layer, "fc1");
        // 2 epochs x 4 batches, plus the step-0 snapshot.
        assert_eq!(traj.samples.len(), 9);
        assert_eq!(result.step_losses.len(), 8);
        assert_eq!(traj.samples[0].step, 0);
        assert_eq!(traj.samples[0].sigma, 1.0);
        assert!(traj.samples[0].lambdas.iter().all(|&l| l == 1.0));
        assert_eq!(traj.samples.last().unwrap().step, 8);
        // Training moved the magnitudes.
        assert!(traj
            .samples
            .last()
            .unwrap()
            .lambdas
            .iter()
            .any(|&l| (l - 1.0).abs() > 1e-6));
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_runs() {
        let ds = toy_dataset(24);
        let run = || {
            let mut model = toy_model(Normalization::Cp, LambdaInit::StdNormal, 3);
            let result = train(&mut model, &ds, None, &base_config()).unwrap();
            let eval = evaluate(&mut model, &ds, 8).unwrap();
            (result.step_losses, eval.loss, eval.accuracy)
        };
        let (losses_a, loss_a, acc_a) = run();
        let (losses_b, loss_b, acc_b) = run();
        assert_eq!(losses_a, losses_b);
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(acc_a, acc_b);
    }

    #[test]
    fn divergence_is_reported_not_hidden() {
        let ds = toy_dataset(16);
        let mut model = toy_model(Normalization::Cp, LambdaInit::Ones, 2);
        let cfg = TrainConfig {
            learning_rate: 1e12,
            epochs: 3,
            ..base_config()
        };
        let result = train(&mut model, &ds, None, &cfg).unwrap();
        assert!(result.diverged);
        let detail = result.divergence.unwrap();
        assert!(detail.contains("step"), "{detail}");
    }

    #[test]
    fn early_stopping_respects_patience() {
        let ds = toy_dataset(32);
        let (tr, val) = ds.split_validation(0.25).unwrap();
        let mut model = toy_model(Normalization::None, LambdaInit::Ones, 4);
        let cfg = TrainConfig {
            // Tiny learning rate: accuracy plateaus immediately, so patience
            // must trigger well before the epoch budget.
            learning_rate: 1e-12,
            epochs: 50,
            early_stop_patience: Some(2),
            ..base_config()
        };
        let result = train(&mut model, &tr, Some(&val), &cfg).unwrap();
        assert!(result.stopped_early);
        assert!(result.epochs.len() <= 4, "ran {} epochs", result.epochs.len());
        assert!(result.epochs.iter().all(|e| e.val.is_some()));
    }

    #[test]
    fn early_stopping_without_validation_data_is_rejected() {
        let ds = toy_dataset(8);
        let mut model = toy_model(Normalization::None, LambdaInit::Ones, 6);
        let cfg = TrainConfig {
            early_stop_patience: Some(1),
            ..base_config()
        };
        assert!(train(&mut model, &ds, None, &cfg).is_err());
    }

    #[test]
    fn renormalize_hook_keeps_columns_unit_across_epochs() {
        let ds = toy_dataset(16);
        let mut model = toy_model(Normalization::Cp, LambdaInit::StdNormal, 7);
        let cfg = TrainConfig {
            epochs: 3,
            ..base_config()
        };
        train(&mut model, &ds, None, &cfg).unwrap();
        for (_, param) in model.cp_layers() {
            for factor in param.cp.factors() {
                for r in 0..factor.cols() {
                    let sq: f64 = (0..factor.rows()).map(|i| factor.at(i, r).powi(2)).sum();
                    assert!((sq.sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weight_norm_and_dense_models_train_too() {
        let ds = toy_dataset(32);
        for norm in [Normalization::None, Normalization::Weight] {
            let mut model = toy_model(norm, LambdaInit::Ones, 8);
            let result = train(&mut model, &ds, None, &base_config()).unwrap();
            assert!(!result.diverged);
            assert!(result.lambda_trajectories.is_empty());
            let after = evaluate(&mut model, &ds, 8).unwrap();
            assert!(after.accuracy > 0.9, "accuracy {}", after.accuracy);
        }
    }
}

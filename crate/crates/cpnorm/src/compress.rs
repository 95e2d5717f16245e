//! Magnitude-based rank truncation of CP-parameterized layers, the plan
//! describing what was removed, and post-compression fine-tuning.
//!
//! Because training keeps factor columns unit-length, each term's
//! contribution to the weight tensor is measured entirely by `|lambda_r|`;
//! truncation keeps the largest-magnitude terms and drops the rest.

use crate::data::Dataset;
use crate::nn::param::{CpNormGrads, CpNormParam};
use crate::nn::Model;
use crate::optim::OptimKind;
use crate::tensor::Matrix;
use crate::train::{train_with_hook, EpochHook, TrainConfig, TrainResult};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// What happened to one CP layer during compression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCompression {
    pub layer: String,
    pub original_rank: usize,
    /// Original term indices retained, in decreasing `|lambda|` order.
    pub kept_indices: Vec<usize>,
    /// `lambda` values of the retained terms, aligned with `kept_indices`.
    pub lambdas_retained: Vec<f64>,
    /// `lambda` values of the discarded terms, in decreasing `|lambda|` order.
    pub lambdas_discarded: Vec<f64>,
    pub weights_before: usize,
    pub weights_after: usize,
}

/// Full record of a [`compress_model`] call, serialized to JSON alongside
/// the compressed checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionPlan {
    /// Requested fraction of terms removed.
    pub rate: f64,
    /// `1 - rate`, applied uniformly to every CP layer.
    pub keep_fraction: f64,
    pub layers: Vec<LayerCompression>,
    /// Trainable weight scalars across the whole model (biases excluded),
    /// before and after truncation.
    pub weights_before: usize,
    pub weights_after: usize,
    /// `1 - weights_after / weights_before`.
    pub realized_rate: f64,
}

/// Term indices in decreasing `|lambda|` order; ties keep the lower index
/// first.
pub fn magnitude_order(lambdas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| {
        lambdas[b]
            .abs()
            .partial_cmp(&lambdas[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Number of terms kept at a given fraction: nearest integer (half away
/// from zero), floored at one term, capped at the full rank.
pub fn kept_terms(rank: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * rank as f64).round() as usize).clamp(1, rank)
}

/// Trainable scalars in one CP parameter block (factors + lambdas + sigma).
pub fn cp_weight_count(param: &CpNormParam) -> usize {
    let rank = param.cp.rank();
    let dims: usize = param.cp.factors().iter().map(Matrix::rows).sum();
    rank * dims + rank + 1
}

/// Keeps the `kept_terms(R, keep_fraction)` largest-`|lambda|` terms.
///
/// Surviving columns stay in their original relative order (so
/// `keep_fraction = 1` is the bitwise identity); the returned indices list
/// the retained terms by decreasing magnitude for reporting.
pub fn truncate(param: &CpNormParam, keep_fraction: f64) -> Result<(CpNormParam, Vec<usize>)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let rank = param.cp.rank();
    let keep = kept_terms(rank, keep_fraction);
    let mut kept = magnitude_order(param.cp.lambdas());
    kept.truncate(keep);

    let mut layout = kept.clone();
    layout.sort_unstable();
    let factors = param
        .cp
        .factors()
        .iter()
        .map(|f| {
            Matrix::from_fn(f.rows(), layout.len(), |i, j| f.at(i, layout[j]))
        })
        .collect();
    let lambdas = layout.iter().map(|&r| param.cp.lambdas()[r]).collect();
    Ok((
        CpNormParam {
            cp: crate::cp::CpForm::new(factors, lambdas)?,
            sigma: param.sigma,
        },
        kept,
    ))
}

/// Truncates every CP layer to a `1 - rate` fraction of its terms, resizing
/// gradient buffers to match, and reports the plan.
pub fn compress_model(model: &mut Model, rate: f64) -> Result<CompressionPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "compression rate must be in [0, 1), got {rate}"
        )));
    }
    let keep_fraction = 1.0 - rate;
    let weights_before = model.param_count().weights;

    let mut layers = Vec::new();
    for (name, param, grads) in model.cp_layers_mut() {
        let before = cp_weight_count(param);
        let lambdas = param.cp.lambdas().to_vec();
        let (truncated, kept) = truncate(param, keep_fraction)?;
        let discarded: Vec<f64> = magnitude_order(&lambdas)
            .into_iter()
            .skip(kept.len())
            .map(|r| lambdas[r])
            .collect();
        layers.push(LayerCompression {
            layer: name.to_string(),
            original_rank: lambdas.len(),
            lambdas_retained: kept.iter().map(|&r| lambdas[r]).collect(),
            kept_indices: kept,
            lambdas_discarded: discarded,
            weights_before: before,
            weights_after: cp_weight_count(&truncated),
        });
        *grads = CpNormGrads::zeros_like(&truncated);
        *param = truncated;
    }
    if layers.is_empty() {
        return Err(Error::NothingToCompress);
    }

    let weights_after = model.param_count().weights;
    Ok(CompressionPlan {
        rate,
        keep_fraction,
        layers,
        weights_before,
        weights_after,
        realized_rate: 1.0 - weights_after as f64 / weights_before as f64,
    })
}

/// Fine-tuning configuration; the optimizer is always plain SGD, which is
/// the only one that stays stable on freshly truncated models.
#[derive(Debug, Clone)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Standard training (renormalization hook active) on the compressed
/// parameterization.
pub fn fine_tune(
    model: &mut Model,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &FineTuneConfig,
) -> Result<TrainResult> {
    fine_tune_with_hook(model, train_data, val_data, cfg, None)
}

/// [`fine_tune`] with an optional per-epoch observer (see
/// [`crate::train::EpochHook`]).
pub fn fine_tune_with_hook(
    model: &mut Model,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &FineTuneConfig,
    on_epoch: Option<&mut EpochHook>,
) -> Result<TrainResult> {
    train_with_hook(
        model,
        train_data,
        val_data,
        &TrainConfig {
            optimizer: OptimKind::Sgd,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            renormalize: true,
            early_stop_patience: None,
        },
        on_epoch,
    )
}

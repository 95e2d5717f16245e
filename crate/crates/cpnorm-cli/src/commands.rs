//! The four subcommands, plus dataset file resolution (with transparent
//! gzip unpacking) and multi-seed replica orchestration.

use crate::checkpoint::{
    build_model, load_checkpoint, quantize_to_stored_precision, save_checkpoint, CheckpointMeta,
};
use crate::config::{Architecture, DatasetKind, RunConfig};
use crate::outputs::{
    write_config_echo, write_eval_json, write_fit_curve, write_lambda_histogram,
    write_lambda_trajectory, write_metrics_csv, write_rank_table, write_summary_json, RankRow,
    RunSummary, SummaryStat,
};
use crate::CliError;
use cpnorm::compress::{compress_model, fine_tune_with_hook, FineTuneConfig};
use cpnorm::cp::{estimate_rank, RankSearchOptions};
use cpnorm::data::{load_cifar10, load_mnist, Dataset};
use cpnorm::nn::{Model, Normalization};
use cpnorm::optim::OptimKind;
use cpnorm::train::{
    evaluate, train_with_hook, EpochHook, SplitMetrics, TrainConfig, TrainResult,
};
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Returns `path` if it exists, unpacking `path.gz` next to it first when
/// only the compressed form is present.
fn ensure_unpacked(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        return Ok(());
    }
    let mut gz_name = path.as_os_str().to_owned();
    gz_name.push(".gz");
    let gz_path = PathBuf::from(gz_name);
    if !gz_path.exists() {
        return Err(CliError::Data(format!(
            "missing data file {} (no {} either)",
            path.display(),
            gz_path.display()
        )));
    }
    let bytes = std::fs::read(&gz_path)?;
    let mut raw = Vec::new();
    GzDecoder::new(&bytes[..])
        .read_to_end(&mut raw)
        .map_err(|e| CliError::Data(format!("corrupt gzip {}: {e}", gz_path.display())))?;
    std::fs::write(path, raw)?;
    Ok(())
}

/// Loads `(train, test)` for a dataset rooted at `data_dir/<dataset>/`.
///
/// MNIST expects the four canonical IDX files; CIFAR-10 expects
/// `data_batch_*.bin` (however many are present, loaded in name order) and
/// `test_batch.bin`.
pub fn load_dataset_pair(
    kind: DatasetKind,
    data_dir: &Path,
) -> Result<(Dataset, Dataset), CliError> {
    match kind {
        DatasetKind::Mnist => {
            let dir = data_dir.join("mnist");
            let files = [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ]
            .map(|f| dir.join(f));
            for f in &files {
                ensure_unpacked(f)?;
            }
            let train = load_mnist(&files[0], &files[1])?;
            let mut test = load_mnist(&files[2], &files[3])?;
            test.split = "test".into();
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let dir = data_dir.join("cifar10");
            let mut batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| {
                    let mut gz = p.as_os_str().to_owned();
                    gz.push(".gz");
                    p.exists() || Path::new(&gz).exists()
                })
                .collect();
            if batches.is_empty() {
                return Err(CliError::Data(format!(
                    "no data_batch_*.bin files under {}",
                    dir.display()
                )));
            }
            batches.sort();
            for b in &batches {
                ensure_unpacked(b)?;
            }
            let test_path = dir.join("test_batch.bin");
            ensure_unpacked(&test_path)?;
            let train = load_cifar10(&batches)?;
            let mut test = load_cifar10(&[&test_path])?;
            test.split = "test".into();
            Ok((train, test))
        }
    }
}

/// Carves the configured subset and validation split from the training set.
fn prepare_splits(cfg: &RunConfig, train_full: &Dataset) -> Result<(Dataset, Dataset), CliError> {
    let subset = train_full.subset_fraction(cfg.subset)?;
    let (tr, val) = subset.split_validation(cfg.val_fraction)?;
    Ok((tr, val))
}

/// Estimates per-layer CP ranks of a freshly initialized dense model and
/// writes the table plus per-layer fit curves.
pub fn cmd_estimate_ranks(cfg: &RunConfig) -> Result<String, CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    // The table describes the architecture's dense initialization, so the
    // run's normalization/rank settings do not enter here.
    let model = build_model(
        cfg.architecture,
        cfg.dataset,
        Normalization::None,
        None,
        cfg.init,
        cfg.lambda_init,
        cfg.seed,
    )?;
    let mut rows = Vec::new();
    for (name, tensor) in model.weight_tensors()? {
        let estimate = estimate_rank(
            &tensor,
            &RankSearchOptions {
                fit_threshold: cfg.fit_threshold,
                rank_step: None,
                max_rank: None,
                seed: cfg.seed,
            },
        )?;
        write_fit_curve(&cfg.out_dir, &name, &estimate.curve)?;
        rows.push(RankRow {
            layer: name,
            shape: tensor.shape().to_vec(),
            estimate,
        });
    }
    write_config_echo(&cfg.out_dir, cfg, cfg.seed)?;
    write_rank_table(&cfg.out_dir, &rows)
}

/// Everything `cmd_train` reports for one replica.
struct ReplicaOutcome {
    seed: u64,
    test: SplitMetrics,
}

/// True when every trainable scalar is finite — the gate a state must pass
/// before it may overwrite the retained "last good" checkpoint.
fn params_all_finite(model: &mut Model) -> Result<bool, CliError> {
    let mut finite = true;
    model.visit_params(&mut |_, values, _| {
        finite &= values.iter().all(|v| v.is_finite());
        Ok(())
    })?;
    Ok(finite)
}

fn run_dir_for(cfg: &RunConfig, seed: u64) -> PathBuf {
    if cfg.seeds == 1 {
        cfg.out_dir.clone()
    } else {
        cfg.out_dir.join(format!("seed_{seed}"))
    }
}

fn write_training_outputs(
    dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    model: &Model,
    initial_lambdas: &[(String, Vec<f64>)],
    result: &TrainResult,
) -> Result<(), CliError> {
    write_config_echo(dir, cfg, seed)?;
    write_metrics_csv(dir, &result.epochs)?;
    for traj in &result.lambda_trajectories {
        write_lambda_trajectory(dir, traj)?;
    }
    for ((layer, initial), (_, param)) in initial_lambdas.iter().zip(model.cp_layers()) {
        write_lambda_histogram(dir, layer, initial, param.cp.lambdas())?;
    }
    Ok(())
}

fn to_lib_err(e: CliError) -> cpnorm::Error {
    cpnorm::Error::Data(e.to_string())
}

/// Trains one replica into `dir`. A checkpoint of the initial state is
/// written up front and refreshed after every epoch that ends with finite
/// parameters, so a diverging run always leaves the last good state on
/// disk; a successful run overwrites it with the final parameters and the
/// test metrics measured at stored precision.
fn run_one_training(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    tr: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<ReplicaOutcome, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut model = build_model(
        cfg.architecture,
        cfg.dataset,
        cfg.normalization,
        cfg.ranks.as_deref(),
        cfg.init,
        cfg.lambda_init,
        seed,
    )?;
    let initial_lambdas: Vec<(String, Vec<f64>)> = model
        .cp_layers()
        .iter()
        .map(|(name, p)| (name.to_string(), p.cp.lambdas().to_vec()))
        .collect();

    let ckpt_path = dir.join("checkpoint.ckpt");
    let meta_at = |epochs_trained: usize, test_metrics: Option<SplitMetrics>| CheckpointMeta {
        architecture: cfg.architecture,
        dataset: cfg.dataset,
        normalization: cfg.normalization,
        seed,
        epochs_trained,
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
        test_metrics,
    };
    save_checkpoint(&mut model, &meta_at(0, None), &ckpt_path)?;
    let persist: &mut EpochHook = &mut |m, em| {
        if params_all_finite(m).map_err(to_lib_err)? {
            save_checkpoint(m, &meta_at(em.epoch + 1, None), &ckpt_path).map_err(to_lib_err)?;
        }
        Ok(())
    };

    let result = train_with_hook(
        &mut model,
        tr,
        Some(val),
        &TrainConfig {
            optimizer: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            renormalize: cfg.renormalize,
            early_stop_patience: cfg.early_stop_patience,
        },
        Some(persist),
    )?;
    write_training_outputs(dir, cfg, seed, &model, &initial_lambdas, &result)?;

    if let Some(cause) = &result.divergence {
        return Err(CliError::Divergence(format!(
            "seed {seed}: {cause}; last good checkpoint retained at {}",
            ckpt_path.display()
        )));
    }

    quantize_to_stored_precision(&mut model)?;
    let test_metrics = evaluate(&mut model, test, cfg.batch_size)?;
    save_checkpoint(
        &mut model,
        &meta_at(result.epochs.len(), Some(test_metrics)),
        &ckpt_path,
    )?;
    write_eval_json(&dir.join("eval.json"), test_metrics)?;
    Ok(ReplicaOutcome {
        seed,
        test: test_metrics,
    })
}

/// Trains `cfg.seeds` replicas and writes the cross-seed summary; the
/// returned report is what the binary prints.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let (train_full, test) = load_dataset_pair(cfg.dataset, &cfg.data_dir)?;
    let (tr, val) = prepare_splits(cfg, &train_full)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut outcomes = Vec::new();
    for i in 0..cfg.seeds {
        let seed = cfg.seed.wrapping_add(i as u64);
        let dir = run_dir_for(cfg, seed);
        outcomes.push(run_one_training(cfg, seed, &dir, &tr, &val, &test)?);
    }

    let mut report = String::new();
    for o in &outcomes {
        report.push_str(&format!(
            "seed {}: test loss {:.6}, test accuracy {:.4}%\n",
            o.seed,
            o.test.loss,
            100.0 * o.test.accuracy
        ));
    }
    if cfg.seeds > 1 {
        let summary = RunSummary {
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            test_loss: SummaryStat::from_values(outcomes.iter().map(|o| o.test.loss).collect()),
            test_accuracy: SummaryStat::from_values(
                outcomes.iter().map(|o| o.test.accuracy).collect(),
            ),
        };
        write_summary_json(&cfg.out_dir, &summary)?;
        report.push_str(&format!(
            "test accuracy over {} seeds: {:.4}% +- {:.4}\n",
            cfg.seeds,
            100.0 * summary.test_accuracy.mean,
            100.0 * summary.test_accuracy.std
        ));
    }
    Ok(report)
}

/// Truncates a trained CP checkpoint, fine-tunes it, and writes the plan,
/// fine-tune metrics, and the compressed checkpoint.
pub fn cmd_compress(cfg: &RunConfig, checkpoint: &Path) -> Result<String, CliError> {
    let (header, mut model) = load_checkpoint(checkpoint)?;
    let dataset: DatasetKind = header
        .dataset
        .parse()
        .map_err(|e: String| CliError::Data(e))?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let weights_before = model.param_count().weights;
    let plan = compress_model(&mut model, cfg.compress_rate)?;
    let plan_json = serde_json::to_string_pretty(&plan)
        .map_err(|e| CliError::Data(format!("cannot encode compression plan: {e}")))?;
    std::fs::write(cfg.out_dir.join("plan.json"), plan_json + "\n")?;

    let (train_full, test) = load_dataset_pair(dataset, &cfg.data_dir)?;
    let (tr, val) = prepare_splits(cfg, &train_full)?;
    let architecture: Architecture = header
        .architecture
        .parse()
        .map_err(|e: String| CliError::Data(e))?;
    let ckpt_path = cfg.out_dir.join("compressed.ckpt");
    let meta_at = |tuned_epochs: usize, test_metrics: Option<SplitMetrics>| CheckpointMeta {
        architecture,
        dataset,
        normalization: Normalization::Cp,
        seed: header.seed,
        epochs_trained: header.epochs_trained + tuned_epochs,
        optimizer: OptimKind::Sgd,
        learning_rate: cfg.fine_tune_lr,
        test_metrics,
    };
    save_checkpoint(&mut model, &meta_at(0, None), &ckpt_path)?;
    let persist: &mut EpochHook = &mut |m, em| {
        if params_all_finite(m).map_err(to_lib_err)? {
            save_checkpoint(m, &meta_at(em.epoch + 1, None), &ckpt_path).map_err(to_lib_err)?;
        }
        Ok(())
    };
    let result = fine_tune_with_hook(
        &mut model,
        &tr,
        Some(&val),
        &FineTuneConfig {
            learning_rate: cfg.fine_tune_lr,
            epochs: cfg.fine_tune_epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
        Some(persist),
    )?;
    write_config_echo(&cfg.out_dir, cfg, cfg.seed)?;
    write_metrics_csv(&cfg.out_dir, &result.epochs)?;
    if let Some(cause) = &result.divergence {
        return Err(CliError::Divergence(format!(
            "fine-tuning diverged: {cause}; last good checkpoint retained at {}",
            ckpt_path.display()
        )));
    }

    quantize_to_stored_precision(&mut model)?;
    let test_metrics = evaluate(&mut model, &test, cfg.batch_size)?;
    save_checkpoint(
        &mut model,
        &meta_at(result.epochs.len(), Some(test_metrics)),
        &ckpt_path,
    )?;
    write_eval_json(&cfg.out_dir.join("eval.json"), test_metrics)?;

    let before_acc = header
        .test_metrics
        .map(|m| format!("{:.4}%", 100.0 * m.accuracy))
        .unwrap_or_else(|| "unrecorded".into());
    Ok(format!(
        "rate {:.2}: weights {} -> {} (realized {:.4})\n\
         uncompressed test accuracy {}, compressed+tuned {:.4}%\n",
        cfg.compress_rate,
        weights_before,
        plan.weights_after,
        plan.realized_rate,
        before_acc,
        100.0 * test_metrics.accuracy
    ))
}

/// Evaluates a checkpoint on a dataset split with dropout off.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    dataset_override: Option<DatasetKind>,
) -> Result<String, CliError> {
    let (header, mut model) = load_checkpoint(checkpoint)?;
    let dataset = match dataset_override {
        Some(d) => d,
        None => header
            .dataset
            .parse()
            .map_err(|e: String| CliError::Data(e))?,
    };
    let (train_full, test) = load_dataset_pair(dataset, &cfg.data_dir)?;
    let data = match split {
        "test" => test,
        "train" => train_full,
        other => {
            return Err(CliError::Config(format!(
                "unknown split '{other}' (test | train)"
            )))
        }
    };
    let metrics = evaluate(&mut model, &data, cfg.batch_size)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_eval_json(&cfg.out_dir.join("eval.json"), metrics)?;
    Ok(format!(
        "{} {}: loss {:.6}, accuracy {:.4}%\n",
        dataset.as_str(),
        split,
        metrics.loss,
        100.0 * metrics.accuracy
    ))
}

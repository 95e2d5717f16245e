//! File outputs for run directories: metrics CSV, magnitude trajectories
//! and histograms, rank tables with fit curves, and evaluation/summary JSON.
//!
//! Every writer is deterministic — identical inputs produce byte-identical
//! files — because the determinism contract is checked at the file level.

use crate::config::RunConfig;
use crate::CliError;
use cpnorm::cp::RankEstimate;
use cpnorm::train::{EpochMetrics, LambdaTrajectory, SplitMetrics};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const HISTOGRAM_BINS: usize = 20;

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush()
        .map_err(|e| CliError::Data(format!("cannot flush {}: {e}", path.display())))
}

fn record<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// `config.txt`: the effective configuration as re-parseable `key = value`
/// lines, preceded by the execution facts that are not configuration.
pub fn write_config_echo(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let mut echoed = cfg.clone();
    echoed.seed = seed;
    let text = format!("# threads = 1\n{echoed}");
    std::fs::write(dir.join("config.txt"), text)?;
    Ok(())
}

/// `metrics.csv`: one `epoch,split,loss,accuracy` row per split per epoch.
pub fn write_metrics_csv(dir: &Path, epochs: &[EpochMetrics]) -> Result<(), CliError> {
    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    record(&mut w, &path, ["epoch", "split", "loss", "accuracy"])?;
    for e in epochs {
        record(
            &mut w,
            &path,
            [
                e.epoch.to_string(),
                "train".to_string(),
                e.train.loss.to_string(),
                e.train.accuracy.to_string(),
            ],
        )?;
        if let Some(val) = e.val {
            record(
                &mut w,
                &path,
                [
                    e.epoch.to_string(),
                    "val".to_string(),
                    val.loss.to_string(),
                    val.accuracy.to_string(),
                ],
            )?;
        }
    }
    finish(w, &path)
}

/// `lambda_trajectory_<layer>.csv`: `step,sigma,lambda_0,...`, one row per
/// recorded optimizer step (step 0 is the initial state).
pub fn write_lambda_trajectory(dir: &Path, traj: &LambdaTrajectory) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("lambda_trajectory_{}.csv", traj.layer));
    let mut w = csv_writer(&path)?;
    let rank = traj.samples.first().map_or(0, |s| s.lambdas.len());
    let mut header = vec!["step".to_string(), "sigma".to_string()];
    header.extend((0..rank).map(|r| format!("lambda_{r}")));
    record(&mut w, &path, header)?;
    for s in &traj.samples {
        let mut row = vec![s.step.to_string(), s.sigma.to_string()];
        row.extend(s.lambdas.iter().map(|l| l.to_string()));
        record(&mut w, &path, row)?;
    }
    finish(w, &path)?;
    Ok(path)
}

/// `lambda_hist_<layer>.csv`: shared equal-width bins over the initial and
/// final magnitude distributions, with one count column for each.
pub fn write_lambda_histogram(
    dir: &Path,
    layer: &str,
    initial: &[f64],
    final_: &[f64],
) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("lambda_hist_{layer}.csv"));
    let all = initial.iter().chain(final_);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let bin_of = |x: f64| {
        (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
    };
    let mut counts = [[0usize; HISTOGRAM_BINS]; 2];
    for (which, values) in [initial, final_].into_iter().enumerate() {
        for &v in values {
            counts[which][bin_of(v)] += 1;
        }
    }

    let mut w = csv_writer(&path)?;
    record(
        &mut w,
        &path,
        ["bin_left", "bin_right", "count_initial", "count_final"],
    )?;
    for b in 0..HISTOGRAM_BINS {
        record(
            &mut w,
            &path,
            [
                (lo + b as f64 * width).to_string(),
                (lo + (b + 1) as f64 * width).to_string(),
                counts[0][b].to_string(),
                counts[1][b].to_string(),
            ],
        )?;
    }
    finish(w, &path)?;
    Ok(path)
}

/// `fit_<layer>.csv`: the `(rank, fit)` curve a rank search probed.
pub fn write_fit_curve(dir: &Path, layer: &str, curve: &[(usize, f64)]) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("fit_{layer}.csv"));
    let mut w = csv_writer(&path)?;
    record(&mut w, &path, ["rank", "fit"])?;
    for (rank, fit) in curve {
        record(&mut w, &path, [rank.to_string(), fit.to_string()])?;
    }
    finish(w, &path)?;
    Ok(path)
}

/// One row of the rank table.
pub struct RankRow {
    pub layer: String,
    pub shape: Vec<usize>,
    pub estimate: RankEstimate,
}

/// `ranks.csv` plus a rendered text table for stdout; layers whose search
/// never reached the fit threshold are marked in both.
pub fn write_rank_table(dir: &Path, rows: &[RankRow]) -> Result<String, CliError> {
    let path = dir.join("ranks.csv");
    let mut w = csv_writer(&path)?;
    record(&mut w, &path, ["layer", "shape", "rank", "fit", "converged"])?;
    for row in rows {
        let shape = row
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        record(
            &mut w,
            &path,
            [
                row.layer.clone(),
                shape,
                row.estimate.rank.to_string(),
                row.estimate.fit.to_string(),
                row.estimate.converged.to_string(),
            ],
        )?;
    }
    finish(w, &path)?;

    let mut text = format!("{:<8} {:>16} {:>6}  fit\n", "layer", "shape", "rank");
    for row in rows {
        let shape = row
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let marker = if row.estimate.converged {
            String::new()
        } else {
            "  [threshold unreached]".to_string()
        };
        text.push_str(&format!(
            "{:<8} {:>16} {:>6}  {:.6}{}\n",
            row.layer, shape, row.estimate.rank, row.estimate.fit, marker
        ));
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

/// `eval.json` (or another name the caller picks).
pub fn write_eval_json(path: &Path, metrics: SplitMetrics) -> Result<(), CliError> {
    let report = EvalReport {
        loss: metrics.loss,
        accuracy: metrics.accuracy,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("cannot encode eval report: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryStat {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single replica.
    pub std: f64,
    pub values: Vec<f64>,
}

impl SummaryStat {
    pub fn from_values(values: Vec<f64>) -> SummaryStat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SummaryStat { mean, std, values }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub test_loss: SummaryStat,
    pub test_accuracy: SummaryStat,
}

/// `summary.json`: mean and standard deviation of the replica results.
pub fn write_summary_json(dir: &Path, summary: &RunSummary) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Data(format!("cannot encode summary: {e}")))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

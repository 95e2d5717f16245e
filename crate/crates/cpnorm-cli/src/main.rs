//! Binary entry point: argument parsing, configuration resolution, dispatch.

use clap::{Args, Parser, Subcommand};
use cpnorm_cli::commands::{cmd_compress, cmd_estimate_ranks, cmd_eval, cmd_train};
use cpnorm_cli::config::{
    parse_init, parse_lambda_init, parse_normalization, parse_optimizer, Architecture,
    DatasetKind, LambdaInit, Normalization, OptimKind, Overrides, Preset, RankList, RunConfig,
    WeightInit,
};
use cpnorm_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Train, compress, and evaluate small image classifiers whose weights are
/// norm-scaled CP tensor decompositions.
#[derive(Debug, Parser)]
#[command(name = "cpnorm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate per-layer CP ranks of a freshly initialized dense model
    EstimateRanks(CommonArgs),
    /// Train a model and write metrics, diagnostics, and a checkpoint
    Train(CommonArgs),
    /// Truncate a trained checkpoint's CP terms and fine-tune the result
    Compress(CompressArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Path to a `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,

    /// Named bundle of defaults (desk | paper)
    #[arg(long)]
    preset: Option<Preset>,

    /// Directory holding `mnist/` and `cifar10/` dataset files
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// Directory run outputs are written into
    #[arg(long)]
    out: Option<PathBuf>,

    /// Base RNG seed
    #[arg(long)]
    seed: Option<u64>,

    /// Number of replica runs on consecutive seeds
    #[arg(long)]
    seeds: Option<usize>,

    /// Model family (lenet | alexnet)
    #[arg(long)]
    architecture: Option<Architecture>,

    /// Dataset (mnist | cifar10)
    #[arg(long)]
    dataset: Option<DatasetKind>,

    /// Weight parameterization (none | weight | cp)
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<Normalization>,

    /// CP initialization scheme (power | als | kaiming_normal | kaiming_uniform)
    #[arg(long, value_parser = parse_init)]
    init: Option<WeightInit>,

    /// Scale-coefficient initialization (ones | standard_normal)
    #[arg(long, value_parser = parse_lambda_init)]
    lambda_init: Option<LambdaInit>,

    /// Optimizer (sgd | rmsprop | adam)
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimKind>,

    /// Learning rate
    #[arg(long)]
    learning_rate: Option<f64>,

    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,

    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,

    /// ALS fit counted as "reconstructed" during rank estimation, in (0, 1)
    #[arg(long)]
    fit_threshold: Option<f64>,

    /// Comma-separated per-weight-layer CP ranks (cp normalization only)
    #[arg(long)]
    ranks: Option<RankList>,

    /// Fraction of the training split actually used, in (0, 1]
    #[arg(long)]
    subset: Option<f64>,

    /// Fraction of the training subset held out for validation, in (0, 1)
    #[arg(long)]
    val_fraction: Option<f64>,

    /// Stop after this many epochs without validation-accuracy improvement
    #[arg(long)]
    early_stop_patience: Option<usize>,

    /// Renormalize CP factor columns after every optimizer step (true | false)
    #[arg(long)]
    renormalize: Option<bool>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            architecture: self.architecture,
            dataset: self.dataset,
            normalization: self.normalization,
            init: self.init,
            lambda_init: self.lambda_init,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            seeds: self.seeds,
            fit_threshold: self.fit_threshold,
            ranks: self.ranks.clone().map(|r| r.0),
            subset: self.subset,
            val_fraction: self.val_fraction,
            early_stop_patience: self.early_stop_patience,
            renormalize: self.renormalize,
            compress_rate: None,
            fine_tune_epochs: None,
            fine_tune_lr: None,
            data_dir: self.data_dir.clone(),
            out_dir: self.out.clone(),
        }
    }

    fn resolve(&self, overrides: &Overrides) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.preset, self.config.as_deref(), overrides)
    }
}

#[derive(Debug, Args)]
struct CompressArgs {
    /// Trained checkpoint to compress
    #[arg(long)]
    checkpoint: PathBuf,

    /// Fraction of CP terms to remove, in [0, 1)
    #[arg(long)]
    rate: Option<f64>,

    /// Fine-tuning epochs after truncation
    #[arg(long)]
    fine_tune_epochs: Option<usize>,

    /// Fine-tuning learning rate (plain SGD)
    #[arg(long)]
    fine_tune_lr: Option<f64>,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,

    /// Split to evaluate on (test | train)
    #[arg(long, default_value = "test")]
    split: String,

    #[command(flatten)]
    common: CommonArgs,
}

/// An explicit `--dataset` stands alone on eval (the architecture comes from
/// the checkpoint), so pair it up for the configuration's pairing check.
fn pair_architecture(o: &mut Overrides) {
    if let (Some(d), None) = (o.dataset, o.architecture) {
        o.architecture = Some(match d {
            DatasetKind::Mnist => Architecture::Lenet,
            DatasetKind::Cifar10 => Architecture::Alexnet,
        });
    }
}

fn run() -> Result<String, CliError> {
    match Cli::parse().command {
        Command::EstimateRanks(common) => {
            let cfg = common.resolve(&common.overrides())?;
            cmd_estimate_ranks(&cfg)
        }
        Command::Train(common) => {
            let cfg = common.resolve(&common.overrides())?;
            cmd_train(&cfg)
        }
        Command::Compress(args) => {
            let mut o = args.common.overrides();
            o.compress_rate = args.rate;
            o.fine_tune_epochs = args.fine_tune_epochs;
            o.fine_tune_lr = args.fine_tune_lr;
            pair_architecture(&mut o);
            let cfg = args.common.resolve(&o)?;
            cmd_compress(&cfg, &args.checkpoint)
        }
        Command::Eval(args) => {
            let mut o = args.common.overrides();
            pair_architecture(&mut o);
            let dataset_override = o.dataset;
            let cfg = args.common.resolve(&o)?;
            cmd_eval(&cfg, &args.checkpoint, &args.split, dataset_override)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

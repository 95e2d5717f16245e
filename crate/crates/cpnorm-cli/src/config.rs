//! Run configuration: defaults, presets, the flat key = value file format,
//! and command-line overrides, resolved in that order.

use crate::CliError;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

// Re-exported so downstream code (the binary in particular) can name every
// type a configuration holds through this one module.
pub use cpnorm::cp::LambdaInit;
pub use cpnorm::nn::{Normalization, WeightInit};
pub use cpnorm::optim::OptimKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Lenet,
    Alexnet,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Lenet => "lenet",
            Architecture::Alexnet => "alexnet",
        }
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lenet" => Ok(Architecture::Lenet),
            "alexnet" => Ok(Architecture::Alexnet),
            other => Err(format!("unknown architecture '{other}' (lenet | alexnet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Sample shape `[C, H, W]`.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(format!("unknown dataset '{other}' (mnist | cifar10)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Laptop-scale: few epochs on a training subset.
    Desk,
    /// Full-scale runs matching the published experiment grid.
    Paper,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset '{other}' (desk | paper)")),
        }
    }
}

/// Fully resolved configuration for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub architecture: Architecture,
    pub dataset: DatasetKind,
    pub normalization: Normalization,
    pub init: WeightInit,
    pub lambda_init: LambdaInit,
    pub optimizer: OptimKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of replica runs (seed, seed+1, ...).
    pub seeds: usize,
    /// ALS fit counted as "reconstructed" during rank estimation.
    pub fit_threshold: f64,
    /// Per-weight-layer CP rank overrides; only valid with cp normalization.
    pub ranks: Option<Vec<usize>>,
    /// Fraction of the training split actually used.
    pub subset: f64,
    /// Fraction of the (subset) training split held out for validation.
    pub val_fraction: f64,
    pub early_stop_patience: Option<usize>,
    pub renormalize: bool,
    pub compress_rate: f64,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: Architecture::Lenet,
            dataset: DatasetKind::Mnist,
            normalization: Normalization::Cp,
            init: WeightInit::KaimingNormal,
            lambda_init: LambdaInit::Ones,
            optimizer: OptimKind::RmsProp,
            learning_rate: 0.001,
            epochs: 50,
            batch_size: 64,
            seed: 1,
            seeds: 1,
            fit_threshold: 0.999,
            ranks: None,
            subset: 1.0,
            val_fraction: 0.1,
            early_stop_patience: None,
            renormalize: true,
            compress_rate: 0.25,
            fine_tune_epochs: 2,
            fine_tune_lr: 1e-4,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

/// Optional values collected from the command line; `None` keeps the value
/// resolved so far.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub architecture: Option<Architecture>,
    pub dataset: Option<DatasetKind>,
    pub normalization: Option<Normalization>,
    pub init: Option<WeightInit>,
    pub lambda_init: Option<LambdaInit>,
    pub optimizer: Option<OptimKind>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub fit_threshold: Option<f64>,
    pub ranks: Option<Vec<usize>>,
    pub subset: Option<f64>,
    pub val_fraction: Option<f64>,
    pub early_stop_patience: Option<usize>,
    pub renormalize: Option<bool>,
    pub compress_rate: Option<f64>,
    pub fine_tune_epochs: Option<usize>,
    pub fine_tune_lr: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "none" => Ok(Normalization::None),
        "weight" => Ok(Normalization::Weight),
        "cp" => Ok(Normalization::Cp),
        other => Err(format!(
            "unknown normalization '{other}' (none | weight | cp)"
        )),
    }
}

pub fn parse_init(s: &str) -> Result<WeightInit, String> {
    match s {
        "power" => Ok(WeightInit::Power),
        "als" => Ok(WeightInit::Als),
        "kaiming_normal" => Ok(WeightInit::KaimingNormal),
        "kaiming_uniform" => Ok(WeightInit::KaimingUniform),
        other => Err(format!(
            "unknown init '{other}' (power | als | kaiming_normal | kaiming_uniform)"
        )),
    }
}

pub fn parse_lambda_init(s: &str) -> Result<LambdaInit, String> {
    match s {
        "ones" => Ok(LambdaInit::Ones),
        "standard_normal" => Ok(LambdaInit::StdNormal),
        other => Err(format!(
            "unknown lambda_init '{other}' (ones | standard_normal)"
        )),
    }
}

pub fn parse_optimizer(s: &str) -> Result<OptimKind, String> {
    match s {
        "sgd" => Ok(OptimKind::Sgd),
        "rmsprop" => Ok(OptimKind::RmsProp),
        "adam" => Ok(OptimKind::Adam),
        other => Err(format!("unknown optimizer '{other}' (sgd | rmsprop | adam)")),
    }
}

pub fn parse_ranks(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad rank '{}' in rank list", part.trim()))
        })
        .collect()
}

/// A comma-separated rank list as one command-line value.
#[derive(Debug, Clone)]
pub struct RankList(pub Vec<usize>);

impl FromStr for RankList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_ranks(s).map(RankList)
    }
}

fn norm_name(n: Normalization) -> &'static str {
    match n {
        Normalization::None => "none",
        Normalization::Weight => "weight",
        Normalization::Cp => "cp",
    }
}

fn init_name(i: WeightInit) -> &'static str {
    match i {
        WeightInit::Power => "power",
        WeightInit::Als => "als",
        WeightInit::KaimingNormal => "kaiming_normal",
        WeightInit::KaimingUniform => "kaiming_uniform",
    }
}

fn lambda_init_name(l: LambdaInit) -> &'static str {
    match l {
        LambdaInit::Ones => "ones",
        LambdaInit::StdNormal => "standard_normal",
    }
}

fn optimizer_name(o: OptimKind) -> &'static str {
    match o {
        OptimKind::Sgd => "sgd",
        OptimKind::RmsProp => "rmsprop",
        OptimKind::Adam => "adam",
    }
}

impl RunConfig {
    /// Defaults, then preset, then config file, then command-line overrides.
    pub fn resolve(
        preset: Option<Preset>,
        config_file: Option<&Path>,
        overrides: &Overrides,
    ) -> Result<RunConfig, CliError> {
        let file = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                Some((text, path))
            }
            None => None,
        };
        let mut cfg = RunConfig::default();
        if let Some(p) = preset {
            // The preset's epoch budget depends on the architecture, which
            // later layers may still change — peek at their outcome first.
            let mut probe = cfg.clone();
            if let Some((text, path)) = &file {
                probe.apply_file(text, path)?;
            }
            probe.apply_overrides(overrides);
            cfg.architecture = probe.architecture;
            cfg.apply_preset(p);
        }
        if let Some((text, path)) = &file {
            cfg.apply_file(text, path)?;
        }
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Desk => {
                self.epochs = 5;
                self.subset = 0.2;
                self.seeds = 3;
            }
            Preset::Paper => {
                self.subset = 1.0;
                self.seeds = 8;
                self.epochs = match self.architecture {
                    Architecture::Lenet => 50,
                    Architecture::Alexnet => 150,
                };
            }
        }
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    fn apply_file(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_pair(key.trim(), value.trim()).map_err(|msg| {
                CliError::Config(format!("{}:{}: {msg}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    fn apply_pair(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value '{value}' for {key}"))
        }
        match key {
            "architecture" => self.architecture = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "normalization" => self.normalization = parse_normalization(value)?,
            "init" => self.init = parse_init(value)?,
            "lambda_init" => self.lambda_init = parse_lambda_init(value)?,
            "optimizer" => self.optimizer = parse_optimizer(value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "fit_threshold" => self.fit_threshold = num(key, value)?,
            "ranks" => self.ranks = Some(parse_ranks(value)?),
            "subset" => self.subset = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "early_stop_patience" => {
                self.early_stop_patience = Some(num(key, value)?);
            }
            "renormalize" => self.renormalize = num(key, value)?,
            "compress_rate" => self.compress_rate = num(key, value)?,
            "fine_tune_epochs" => self.fine_tune_epochs = num(key, value)?,
            "fine_tune_lr" => self.fine_tune_lr = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field.clone() {
                    self.$field = v;
                })*
            };
        }
        take!(
            architecture,
            dataset,
            normalization,
            init,
            lambda_init,
            optimizer,
            learning_rate,
            epochs,
            batch_size,
            seed,
            seeds,
            fit_threshold,
            subset,
            val_fraction,
            renormalize,
            compress_rate,
            fine_tune_epochs,
            fine_tune_lr,
            data_dir,
            out_dir
        );
        if let Some(v) = o.ranks.clone() {
            self.ranks = Some(v);
        }
        if let Some(v) = o.early_stop_patience {
            self.early_stop_patience = Some(v);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |msg: String| Err(CliError::Config(msg));
        if self.ranks.is_some() && self.normalization != Normalization::Cp {
            return err("rank overrides are only valid with normalization = cp".into());
        }
        match (self.architecture, self.dataset) {
            (Architecture::Lenet, DatasetKind::Mnist)
            | (Architecture::Alexnet, DatasetKind::Cifar10) => {}
            (a, d) => {
                return err(format!(
                    "architecture {} expects its paired dataset, got {}",
                    a.as_str(),
                    d.as_str()
                ))
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.seeds == 0 {
            return err("seeds must be at least 1".into());
        }
        if !(self.fit_threshold > 0.0 && self.fit_threshold < 1.0) {
            return err(format!(
                "fit_threshold must be in (0, 1), got {}",
                self.fit_threshold
            ));
        }
        if !(self.subset > 0.0 && self.subset <= 1.0) {
            return err(format!("subset must be in (0, 1], got {}", self.subset));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.compress_rate) {
            return err(format!(
                "compress_rate must be in [0, 1), got {}",
                self.compress_rate
            ));
        }
        if !(self.fine_tune_lr > 0.0 && self.fine_tune_lr.is_finite()) {
            return err(format!(
                "fine_tune_lr must be positive, got {}",
                self.fine_tune_lr
            ));
        }
        if let Some(ranks) = &self.ranks {
            let expected = match self.architecture {
                Architecture::Lenet => cpnorm::nn::LENET_RANKS.len(),
                Architecture::Alexnet => cpnorm::nn::ALEXNET_RANKS.len(),
            };
            if ranks.len() != expected {
                return err(format!(
                    "{} has {expected} weight layers but {} ranks were given",
                    self.architecture.as_str(),
                    ranks.len()
                ));
            }
            if ranks.iter().any(|&r| r == 0) {
                return err("ranks must all be at least 1".into());
            }
        }
        Ok(())
    }
}

/// The config echo written into every run directory: one `key = value` line
/// per field, in declaration order, re-readable by the same parser.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "architecture = {}", self.architecture.as_str())?;
        writeln!(f, "dataset = {}", self.dataset.as_str())?;
        writeln!(f, "normalization = {}", norm_name(self.normalization))?;
        writeln!(f, "init = {}", init_name(self.init))?;
        writeln!(f, "lambda_init = {}", lambda_init_name(self.lambda_init))?;
        writeln!(f, "optimizer = {}", optimizer_name(self.optimizer))?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "seeds = {}", self.seeds)?;
        writeln!(f, "fit_threshold = {}", self.fit_threshold)?;
        if let Some(ranks) = &self.ranks {
            let list: Vec<String> = ranks.iter().map(|r| r.to_string()).collect();
            writeln!(f, "ranks = {}", list.join(","))?;
        }
        writeln!(f, "subset = {}", self.subset)?;
        writeln!(f, "val_fraction = {}", self.val_fraction)?;
        if let Some(p) = self.early_stop_patience {
            writeln!(f, "early_stop_patience = {p}")?;
        }
        writeln!(f, "renormalize = {}", self.renormalize)?;
        writeln!(f, "compress_rate = {}", self.compress_rate)?;
        writeln!(f, "fine_tune_epochs = {}", self.fine_tune_epochs)?;
        writeln!(f, "fine_tune_lr = {}", self.fine_tune_lr)?;
        writeln!(f, "data_dir = {}", self.data_dir.display())?;
        writeln!(f, "out = {}", self.out_dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn precedence_is_preset_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "epochs = 7\nbatch_size = 32\n").unwrap();
        let overrides = Overrides {
            batch_size: Some(16),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(Preset::Desk), Some(&path), &overrides).unwrap();
        assert_eq!(cfg.epochs, 7, "file beats preset");
        assert_eq!(cfg.batch_size, 16, "flag beats file");
        assert_eq!(cfg.subset, 0.2, "untouched preset value survives");
        assert_eq!(cfg.seeds, 3);
    }

    #[test]
    fn paper_preset_epoch_budget_follows_the_overridden_architecture() {
        let overrides = Overrides {
            architecture: Some(Architecture::Alexnet),
            dataset: Some(DatasetKind::Cifar10),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(Preset::Paper), None, &overrides).unwrap();
        assert_eq!(cfg.epochs, 150);
        assert_eq!(cfg.seeds, 8);
        let cfg = RunConfig::resolve(Some(Preset::Paper), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.epochs, 50);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_file(
            "# full line comment\n\nseed = 9  # trailing comment\n",
            Path::new("inline"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        let err = cfg
            .apply_file("no_such_key = 5\n", Path::new("inline"))
            .unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
        let err = cfg
            .apply_file("epochs = many\n", Path::new("inline"))
            .unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        let err = cfg
            .apply_file("subset 0.5\n", Path::new("inline"))
            .unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn rank_overrides_require_cp_normalization() {
        let mut cfg = RunConfig {
            normalization: Normalization::Weight,
            ranks: Some(vec![4, 4, 4, 4]),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.normalization = Normalization::Cp;
        cfg.validate().unwrap();
    }

    #[test]
    fn rank_override_length_must_match_architecture() {
        let cfg = RunConfig {
            ranks: Some(vec![4, 4]),
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("4 weight layers"), "{err}");
    }

    #[test]
    fn mismatched_architecture_dataset_pairs_are_rejected() {
        let cfg = RunConfig {
            architecture: Architecture::Lenet,
            dataset: DatasetKind::Cifar10,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            architecture: Architecture::Alexnet,
            dataset: DatasetKind::Cifar10,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn config_echo_round_trips_through_the_parser() {
        let cfg = RunConfig {
            ranks: Some(vec![11, 270, 128, 10]),
            early_stop_patience: Some(3),
            seed: 42,
            ..RunConfig::default()
        };
        let mut back = RunConfig::default();
        back.apply_file(&cfg.to_string(), Path::new("echo")).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.ranks, Some(vec![11, 270, 128, 10]));
        assert_eq!(back.early_stop_patience, Some(3));
        assert_eq!(back.out_dir, cfg.out_dir);
    }

    #[test]
    fn numeric_bounds_are_enforced() {
        for (mutate, _label) in [
            (
                Box::new(|c: &mut RunConfig| c.learning_rate = 0.0) as Box<dyn Fn(&mut RunConfig)>,
                "lr",
            ),
            (Box::new(|c: &mut RunConfig| c.epochs = 0), "epochs"),
            (Box::new(|c: &mut RunConfig| c.batch_size = 0), "batch"),
            (Box::new(|c: &mut RunConfig| c.seeds = 0), "seeds"),
            (Box::new(|c: &mut RunConfig| c.fit_threshold = 1.0), "fit"),
            (Box::new(|c: &mut RunConfig| c.subset = 0.0), "subset"),
            (Box::new(|c: &mut RunConfig| c.val_fraction = 1.0), "val"),
            (Box::new(|c: &mut RunConfig| c.compress_rate = 1.0), "rate"),
        ] {
            let mut cfg = RunConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }
}

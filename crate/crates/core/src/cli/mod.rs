//! The `affordance` command line.
//!
//! Every subcommand accepts `--config <file.toml>`. Keys in that file are
//! flag names (`batch_size` or `batch-size`); flags on the command line take
//! precedence over the file, which takes precedence over the environment and
//! built-in defaults.

mod commands;
pub mod files;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::ActionType;

/// Environment variable naming the directory relative paths resolve against.
pub const DATA_DIR_ENV: &str = "AFFORDANCE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "affordance",
    version,
    about = "Bayesian affordance classifier: training, uncertainty-aware inference and calibration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single head or a deep ensemble.
    Train(TrainArgs),
    /// Predict with MC-dropout, an ensemble, or a single deterministic pass.
    Predict(PredictArgs),
    /// Same as `predict --full`: includes both covariance matrices.
    Decompose(PredictArgs),
    /// Accuracy, ECE and Brier score of a predictions file.
    Metrics(MetricsArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Print the label distribution of a dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML file of flag values; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory that relative input and output paths resolve against.
    #[arg(long, env = DATA_DIR_ENV, default_value = ".", value_name = "DIR")]
    pub data_dir: PathBuf,
}

impl CommonArgs {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_dir.join(path)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    /// One head trained with dropout, sampled with MC-dropout.
    #[value(name = "mc_dropout")]
    McDropout,
    /// Independently initialised and shuffled heads.
    #[value(name = "ensemble")]
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMethod {
    #[value(name = "mc_dropout")]
    McDropout,
    #[value(name = "ensemble")]
    Ensemble,
    /// One mask-free pass.
    #[value(name = "deterministic")]
    Deterministic,
}

impl PredictMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictMethod::McDropout => "mc_dropout",
            PredictMethod::Ensemble => "ensemble",
            PredictMethod::Deterministic => "deterministic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Labelled Gaussian blobs.
    Blobs,
    /// Unlabelled blobs shifted off the training manifold.
    Ood,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Training dataset.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    #[arg(long, value_enum, default_value_t = ActionType::Sit)]
    pub action: ActionType,

    #[arg(long, value_enum, default_value_t = TrainMethod::McDropout)]
    pub method: TrainMethod,

    /// Ensemble size (ensemble method only).
    #[arg(long, visible_alias = "M", default_value_t = 50)]
    pub members: usize,

    /// Number of passes over the training set.
    #[arg(long)]
    pub epochs: usize,

    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,

    /// Multiplicative learning-rate decay.
    #[arg(long, default_value_t = 0.85)]
    pub decay_factor: f64,

    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,

    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,

    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,

    /// Dropout rate during training; also stored in the model for MC-dropout.
    #[arg(long, default_value_t = 0.3)]
    pub dropout_rate: f64,

    #[arg(long, default_value_t = crate::model::DEFAULT_HIDDEN_DIM)]
    pub hidden_dim: usize,

    #[arg(long, default_value_t = crate::model::DEFAULT_FC_HIDDEN_DIM)]
    pub fc_hidden_dim: usize,

    #[arg(long, default_value_t = crate::model::NUM_CATEGORIES)]
    pub num_categories: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Directory for model files and logs.
    #[arg(long, default_value = "model", value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Model file or ensemble manifest.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,

    /// Records to predict.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Action whose labels are copied into the output when present.
    #[arg(long, value_enum, default_value_t = ActionType::Sit)]
    pub action: ActionType,

    #[arg(long, value_enum, default_value_t = PredictMethod::McDropout)]
    pub method: PredictMethod,

    /// MC-dropout passes per record [default: 50; ensembles use every member].
    #[arg(long, visible_alias = "M")]
    pub samples: Option<usize>,

    /// MC-dropout rate [default: the rate stored in the model].
    #[arg(long)]
    pub dropout_rate: Option<f64>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Include both covariance matrices in every line.
    #[arg(long)]
    pub full: bool,

    /// JSON-lines output.
    #[arg(long, default_value = "predictions.jsonl", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Output of `predict`; every line must carry a label.
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,

    /// Number of equal-width confidence bins.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_BINS)]
    pub bins: usize,

    /// Report JSON.
    #[arg(long, default_value = "report.json", value_name = "FILE")]
    pub out: PathBuf,

    /// Reliability table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,

    /// Reliability diagram as SVG.
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long, value_enum, default_value_t = SynthKind::Blobs)]
    pub kind: SynthKind,

    /// Number of records.
    #[arg(long, default_value_t = 200)]
    pub count: usize,

    #[arg(long, default_value_t = 3)]
    pub num_classes: usize,

    #[arg(long, default_value_t = 8)]
    pub obj_dim: usize,

    #[arg(long, default_value_t = 8)]
    pub glob_dim: usize,

    #[arg(long, default_value_t = 1)]
    pub num_object_classes: usize,

    /// Distance of each class center from the origin.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,

    /// Per-class standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,

    /// Fraction of labels replaced by a uniformly drawn class.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,

    /// OOD shift along the held-out direction, in class-scale units.
    #[arg(long, default_value_t = 10.0)]
    pub shift: f64,

    /// Action the labels are stored under.
    #[arg(long, value_enum, default_value_t = ActionType::Sit)]
    pub action: ActionType,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Synthetic-spec file; replaces the generator flags above except count.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,

    /// Dataset output.
    #[arg(long, default_value = "synth.jsonl", value_name = "FILE")]
    pub out: PathBuf,

    /// Ground-truth metadata [default: output path with extension .meta.json].
    #[arg(long, value_name = "FILE")]
    pub meta: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Only this action [default: every action with labels].
    #[arg(long, value_enum)]
    pub action: Option<ActionType>,
}

/// Parses `args` (program name first), applies any `--config` file and runs
/// the subcommand. Usage errors, `--help` and `--version` come back as
/// [`clap::Error`] inside the returned error.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = apply_config_file(args)?;
    let cli = Cli::try_parse_from(&args)?;
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Decompose(mut a) => {
            a.full = true;
            commands::predict(&a)
        }
        Command::Metrics(a) => commands::metrics(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Stats(a) => commands::stats(&a),
    }
}

/// Splices the values of a `--config` file in front of the explicit flags so
/// the explicit ones win.
fn apply_config_file(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    if args.len() < 2 || args[1].to_string_lossy().starts_with('-') {
        return Ok(args);
    }
    let Some(path) = find_config_path(&args[2..]) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut spliced = Vec::with_capacity(args.len() + 2 * table.len());
    spliced.extend_from_slice(&args[..2]);
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            bail!(
                "{}: a config file cannot name another config file",
                path.display()
            );
        }
        match value {
            toml::Value::Boolean(true) => spliced.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => {
                spliced.push(flag.into());
                spliced.push(s.into());
            }
            toml::Value::Integer(i) => {
                spliced.push(flag.into());
                spliced.push(i.to_string().into());
            }
            toml::Value::Float(f) => {
                spliced.push(flag.into());
                spliced.push(f.to_string().into());
            }
            _ => bail!(
                "{}: key {key:?} must be a string, number or boolean",
                path.display()
            ),
        }
    }
    spliced.extend_from_slice(&args[2..]);
    Ok(spliced)
}

fn find_config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut found = None;
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            found = iter.next().map(PathBuf::from);
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    found
}

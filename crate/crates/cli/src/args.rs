use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fmatune_core::{Method, Strategy};

#[derive(Debug, Parser)]
#[command(
    name = "fmatune",
    version,
    about = "Corruption-robust finetuning of small CNNs"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Key-value file whose entries stand in for flags not given on the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Use procedural images instead of CIFAR-10, this many per class for training.
    #[arg(long, global = true)]
    pub synthetic: Option<usize>,

    /// Class-balanced subset size per class of the training split.
    #[arg(long, global = true)]
    pub train_per_class: Option<usize>,

    #[arg(long, global = true)]
    pub val_per_class: Option<usize>,

    /// Seed of the corruption noise used at evaluation time.
    #[arg(long, global = true, default_value_t = 0)]
    pub eval_seed: u64,

    /// Calibrated preset manifest (default `<out-dir>/calibration/presets.toml`).
    #[arg(long, global = true)]
    pub presets: Option<PathBuf>,

    /// Use the bundled preset strengths instead of a calibrated manifest.
    #[arg(long, global = true)]
    pub builtin_presets: bool,

    /// Dataset key inside the preset manifest.
    #[arg(long, global = true, default_value = "cifar10")]
    pub preset_dataset: String,

    /// Baseline snapshot (default `<out-dir>/baseline/model.snap`).
    #[arg(long, global = true)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the clean baseline classifier.
    TrainBaseline(TrainBaselineArgs),
    /// Search each corruption's strength for the target accuracy drop.
    Calibrate(CalibrateArgs),
    /// Finetune the baseline with AT, ST or FMA.
    Finetune(FinetuneArgs),
    /// Short finetunes over a grid of regularizer weights.
    GridSearchGamma(GammaArgs),
    /// Evaluate snapshots on clean and corrupted validation data.
    Eval(EvalArgs),
    /// Finetune several methods from one baseline and tabulate the results.
    RunGrid(RunGridArgs),
    /// Accuracy curves and sample corruption images.
    Report(ReportArgs),
    /// Apply one corruption or combined set to an image.
    Augment(AugmentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchName {
    /// Three conv blocks (16, 32, 64 filters, two convs each) and a 128-unit dense layer.
    Default,
    /// Two single-conv blocks (8, 16 filters), no hidden dense layer.
    Tiny,
}

#[derive(Debug, Clone, Args)]
pub struct TrainBaselineArgs {
    /// Comma-separated `rate:epochs` stages.
    #[arg(long, default_value = "0.01:20,0.0001:10,0.000001:10")]
    pub schedule: String,

    #[arg(long, default_value_t = fmatune_core::trainer::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,

    #[arg(long, default_value_t = fmatune_core::trainer::DEFAULT_MOMENTUM)]
    pub momentum: f64,

    #[arg(long, value_enum, default_value_t = ArchName::Default)]
    pub arch: ArchName,

    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = fmatune_core::calibration::DEFAULT_TARGET_DROP)]
    pub target_drop: f64,

    #[arg(long, default_value_t = fmatune_core::calibration::DEFAULT_TOLERANCE)]
    pub tolerance: f64,

    #[arg(long, default_value_t = fmatune_core::calibration::DEFAULT_MAX_ITER)]
    pub max_iter: usize,

    /// Comma-separated corruption kinds (default: all seven).
    #[arg(long)]
    pub kinds: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    #[arg(long, value_parser = parse_method, default_value = "fma")]
    pub method: Method,

    #[arg(long, value_parser = parse_strategy, default_value = "ca")]
    pub strategy: Strategy,

    /// Corruption kind trained on under the individual strategy.
    #[arg(long)]
    pub set: Option<String>,

    /// Regularizer weight: γ for FMA, the stability weight for ST.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,

    #[arg(long, value_enum, default_value_t = StDistanceArg::Kl)]
    pub st_distance: StDistanceArg,

    #[arg(long, default_value_t = fmatune_core::trainer::FINETUNE_RATE)]
    pub rate: f64,

    #[arg(long, default_value_t = fmatune_core::trainer::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,

    #[arg(long, default_value_t = fmatune_core::trainer::DEFAULT_MOMENTUM)]
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StDistanceArg {
    Kl,
    L2,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub method: MethodArgs,

    #[arg(long, default_value_t = fmatune_core::trainer::FINETUNE_EPOCHS)]
    pub epochs: usize,

    /// Run directory name under `<out-dir>/runs` (default derived from method and strategy).
    #[arg(long)]
    pub label: Option<String>,

    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GammaArgs {
    #[command(flatten)]
    pub method: MethodArgs,

    /// Comma-separated weights to try.
    #[arg(long, default_value = "0.01,0.1,1,10")]
    pub grid: String,

    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Snapshots to evaluate; the first is the reference column (default: the baseline).
    #[arg(long = "model", action = clap::ArgAction::Append)]
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunGridArgs {
    #[command(flatten)]
    pub method: MethodArgs,

    /// Comma-separated methods to finetune.
    #[arg(long, default_value = "at,st,fma")]
    pub methods: String,

    #[arg(long, default_value_t = fmatune_core::trainer::FINETUNE_EPOCHS)]
    pub epochs: usize,

    /// Train the baseline and calibrate first when their artifacts are missing.
    #[arg(long)]
    pub auto: bool,

    /// Run the finetunes as parallel child processes.
    #[arg(long)]
    pub parallel: bool,

    /// Baseline schedule used by `--auto`.
    #[arg(long, default_value = "0.01:20,0.0001:10,0.000001:10")]
    pub schedule: String,

    #[arg(long, value_enum, default_value_t = ArchName::Default)]
    pub arch: ArchName,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories to chart (default: every run under `<out-dir>/runs`).
    #[arg(long = "run", action = clap::ArgAction::Append)]
    pub runs: Vec<PathBuf>,

    /// Image used for the corruption samples.
    #[arg(long)]
    pub sample_image: Option<PathBuf>,

    /// Validation image used for samples when no `--sample-image` is given.
    #[arg(long, default_value_t = 0)]
    pub sample_index: usize,

    #[arg(long, default_value_t = 4)]
    pub scale: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,

    /// Corruption kind, or `combined_plus` / `combined_minus`.
    #[arg(long)]
    pub kind: String,

    /// Override the preset strength.
    #[arg(long)]
    pub knob: Option<f64>,

    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: fmatune_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: fmatune_core::Error| e.to_string())
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use aslab::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{layered, ConfigFile};

#[derive(Parser)]
#[command(name = "aslab", version, about = "CAM and saliency analysis for weakly supervised segmentation")]
struct Cli {
    /// TOML manifest with one table per command; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; overrides ASLAB_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a GAP ConvNet on a segmentation dataset directory.
    Train(TrainArgs),
    /// Extract CAM or saliency maps.
    Infer {
        kind: MapKind,
        #[command(flatten)]
        args: InferArgs,
    },
    /// Aggregated saliency under a stochastic plan.
    Aggregate(AggregateArgs),
    /// Turn score maps into label masks.
    Resolve {
        kind: ResolveKind,
        #[command(flatten)]
        args: ResolveArgs,
    },
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Threshold, kernel-size and aggregation-parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Signed distances to the CAM and saliency hyperplanes per GT pixel.
    Hyperplane(HyperplaneArgs),
    /// Render one normalized score map as an 8-bit PGM.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// MNIST digits upsampled with nearest neighbour, masks from non-zero pixels.
    BuildMnist(BuildMnistArgs),
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Basic resolve over the threshold grid.
    Threshold(ThresholdArgs),
    /// Train and evaluate one network per kernel size.
    ContributionWindow(ContributionArgs),
    /// Aggregated saliency along one plan parameter.
    Sensitivity(SensitivityArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Cam,
    Saliency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum ResolveKind {
    Basic,
    Smooth,
    Superpixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum PerturbArg {
    None,
    Gaussian,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Smoothgrad,
    Binarymask,
    RandomCrop,
    RandomPatch,
    DiscPatch,
    DiscCrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum NormalizationArg {
    Coverage,
    StrictMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum AxisArg {
    Sigma,
    P,
    NSamples,
    NCrops,
    CropScale,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct BuildMnistArgs {
    /// Directory with the IDX files (plain or gzipped).
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<SplitArg>,
    /// First image index.
    #[arg(long)]
    pub offset: Option<usize>,
    /// Number of images; the rest of the split when absent.
    #[arg(long)]
    pub count: Option<usize>,
    /// 64 or 128.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub perturb: Option<PerturbArg>,
    /// Gaussian perturbation standard deviation.
    #[arg(long)]
    pub sigma: Option<f32>,
    /// Binary perturbation keep probability.
    #[arg(long)]
    pub p: Option<f32>,
    /// Random horizontal flips.
    #[arg(long)]
    pub standard_augments: bool,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory written by `dataset build-mnist`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Number of image classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; one FMAP per sample.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One map per model class instead of the ground-truth class only.
    #[arg(long)]
    pub all_classes: bool,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct PlanFlags {
    #[arg(long)]
    pub method: Option<MethodArg>,
    /// Samples per image (crops for the crop methods).
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub p: Option<f32>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub p_erase: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long)]
    pub area_min: Option<f32>,
    #[arg(long)]
    pub area_max: Option<f32>,
    #[arg(long)]
    pub aspect_min: Option<f32>,
    #[arg(long)]
    pub aspect_max: Option<f32>,
    #[arg(long)]
    pub normalization: Option<NormalizationArg>,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct AggregateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct ResolveArgs {
    /// FMAP file or directory of FMAP files.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// PGM file, or directory for one mask per map file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f32>,
    /// Image FMAP file, image directory or dataset directory (superpixel only).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Smoothing kernel size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Smoothing kernel standard deviation.
    #[arg(long)]
    pub sigma: Option<f32>,
    /// Felzenszwalb scale.
    #[arg(long)]
    pub k: Option<f32>,
    /// Felzenszwalb pre-smoothing.
    #[arg(long)]
    pub fz_sigma: Option<f32>,
    #[arg(long)]
    pub min_size: Option<usize>,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct EvalFlags {
    /// Ground-truth PGM directory or dataset directory.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// CAM FMAP directory defining DR/NDR.
    #[arg(long)]
    pub cams: Option<PathBuf>,
    #[arg(long)]
    pub tau_cam: Option<f32>,
    /// Number of classes, background included.
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Predicted PGM directory.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Threshold that produced the predictions, recorded in the report.
    #[arg(long)]
    pub tau: Option<f32>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct ThresholdArgs {
    /// Score-map FMAP directory.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// CSV with one row per threshold.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report at the selected threshold.
    #[arg(long)]
    pub best_out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct ContributionArgs {
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub tau_cam: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub axis: Option<AxisArg>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub tau_cam: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanFlags,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct HyperplaneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for per-sample scatter CSVs and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau_cam: Option<f32>,
    #[arg(long)]
    pub tau_sm: Option<f32>,
    /// Analyse only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Default, Serialize, Deserialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Position of the map in a multi-map file.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const SECTIONS: &[&[&str]] = &[
    &["dataset", "build_mnist"],
    &["train"],
    &["infer"],
    &["aggregate"],
    &["resolve"],
    &["evaluate"],
    &["sweep", "threshold"],
    &["sweep", "contribution_window"],
    &["sweep", "sensitivity"],
    &["hyperplane"],
    &["export_heatmap"],
];

/// Validates every section of the file against its command's keys, so a
/// bad key fails whichever command is run.
fn check_keys(file: &ConfigFile) -> Result<()> {
    fn check<A: Default + Serialize + serde::de::DeserializeOwned>(file: &ConfigFile, path: &[&str]) -> Result<()> {
        layered(Some(file), path, &A::default()).map(drop)
    }
    check::<BuildMnistArgs>(file, &["dataset", "build_mnist"])?;
    check::<TrainArgs>(file, &["train"])?;
    check::<InferArgs>(file, &["infer"])?;
    check::<AggregateArgs>(file, &["aggregate"])?;
    check::<ResolveArgs>(file, &["resolve"])?;
    check::<EvaluateArgs>(file, &["evaluate"])?;
    check::<ThresholdArgs>(file, &["sweep", "threshold"])?;
    check::<ContributionArgs>(file, &["sweep", "contribution_window"])?;
    check::<SensitivityArgs>(file, &["sweep", "sensitivity"])?;
    check::<HyperplaneArgs>(file, &["hyperplane"])?;
    check::<HeatmapArgs>(file, &["export_heatmap"])
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    if let Some(f) = &file {
        f.check_sections(SECTIONS)?;
        check_keys(f)?;
    }
    let threads = match cli.threads {
        Some(0) => {
            return Err(Error::Config {
                key: "threads".into(),
                message: "must be positive".into(),
            })
        }
        Some(n) => Some(n),
        None => aslab::parallel::threads_from_env()?,
    };
    let file = file.as_ref();
    aslab::parallel::with_threads(threads, || match cli.command {
        Command::Dataset(DatasetCommand::BuildMnist(a)) => commands::build_mnist(file, a),
        Command::Train(a) => commands::train(file, a),
        Command::Infer { kind, args } => commands::infer(file, kind, args),
        Command::Aggregate(a) => commands::aggregate(file, a),
        Command::Resolve { kind, args } => commands::resolve(file, kind, args),
        Command::Evaluate(a) => commands::evaluate(file, a),
        Command::Sweep(SweepCommand::Threshold(a)) => commands::sweep_threshold(file, a),
        Command::Sweep(SweepCommand::ContributionWindow(a)) => commands::sweep_contribution(file, a),
        Command::Sweep(SweepCommand::Sensitivity(a)) => commands::sweep_sensitivity(file, a),
        Command::Hyperplane(a) => commands::hyperplane(file, a),
        Command::ExportHeatmap(a) => commands::export_heatmap(file, a),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config { key, message } => eprintln!("error: config key `{key}`: {message}"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

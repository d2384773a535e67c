use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ifs_seg::ablation::Metric;
use ifs_seg::encoding::{ConstantPolicy, MembershipConfig, NegationConfig};
use ifs_seg::train::{EarlyStop, EncodeConfig, TrainConfig};
use ifs_seg::{ArchConfig, Family, PhantomSpec};

#[derive(Debug, Parser)]
#[command(
    name = "ifs-seg",
    version,
    about = "Intuitionistic fuzzy image encoding and U-Net / U-Net++ segmentation",
    args_override_self = true
)]
pub struct Cli {
    /// Base seed for data generation, splits, initialisation and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for encoding and parallel ablation cells.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// JSON file with default flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write mu/nu/pi planes and their histograms for one image.
    Encode(EncodeArgs),
    /// Generate a synthetic phantom dataset.
    PhantomGen(PhantomArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Run a negation-parameter sweep.
    Ablate(AblateArgs),
    /// Render bar charts from a sweep summary or the reported tables.
    Plot(PlotArgs),
}

pub const SUBCOMMANDS: [&str; 6] = ["encode", "phantom-gen", "train", "eval", "ablate", "plot"];

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {v}"))
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MembershipKind {
    Minmax,
    Gaussian,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConstantArg {
    Error,
    Zero,
    Half,
}

#[derive(Debug, Clone, Args)]
pub struct MembershipArgs {
    #[arg(long, value_enum, default_value = "minmax")]
    pub membership: MembershipKind,
    /// Center for gaussian or sigmoid membership.
    #[arg(long, allow_negative_numbers = true)]
    pub center: Option<f64>,
    /// Width of gaussian membership.
    #[arg(long, value_parser = positive)]
    pub sigma: Option<f64>,
    /// Slope of sigmoid membership.
    #[arg(long, allow_negative_numbers = true)]
    pub slope: Option<f64>,
    /// Min-max behaviour on constant images.
    #[arg(long, value_enum, default_value = "error")]
    pub constant: ConstantArg,
}

impl MembershipArgs {
    pub fn config(&self) -> Result<MembershipConfig, String> {
        let need = |v: Option<f64>, name: &str, kind: &str| {
            v.ok_or_else(|| format!("--{name} is required for --membership {kind}"))
        };
        Ok(match self.membership {
            MembershipKind::Minmax => MembershipConfig::MinMax {
                constant: match self.constant {
                    ConstantArg::Error => ConstantPolicy::Error,
                    ConstantArg::Zero => ConstantPolicy::Zero,
                    ConstantArg::Half => ConstantPolicy::Half,
                },
            },
            MembershipKind::Gaussian => MembershipConfig::Gaussian {
                center: need(self.center, "center", "gaussian")?,
                sigma: need(self.sigma, "sigma", "gaussian")?,
            },
            MembershipKind::Sigmoid => MembershipConfig::Sigmoid {
                center: need(self.center, "center", "sigmoid")?,
                slope: need(self.slope, "slope", "sigmoid")?,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NegationKind {
    None,
    Sugeno,
    Yager,
}

#[derive(Debug, Clone, Args)]
pub struct NegationArgs {
    /// Sugeno parameter, > 0.
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    pub lambda: f64,
    /// Yager parameter, in (0, 1).
    #[arg(long, default_value_t = 0.4, value_parser = open_unit)]
    pub alpha: f64,
}

impl NegationArgs {
    pub fn config(&self, kind: NegationKind) -> Option<NegationConfig> {
        match kind {
            NegationKind::None => None,
            NegationKind::Sugeno => Some(NegationConfig::Sugeno {
                lambda: self.lambda,
            }),
            NegationKind::Yager => Some(NegationConfig::Yager { alpha: self.alpha }),
        }
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Grayscale input image (PNG or PGM).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub membership: MembershipArgs,
    #[arg(long, value_enum, default_value = "sugeno")]
    pub negation: NegationKind,
    #[command(flatten)]
    pub params: NegationArgs,
    /// Histogram bins per plane.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = PhantomSpec::default().size)]
    pub size: usize,
    /// Four comma-separated class means, BG < CSF < GM < WM.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub tissue_means: Option<Vec<f64>>,
    #[arg(long, default_value_t = PhantomSpec::default().noise_sigma, value_parser = non_negative)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = PhantomSpec::default().pv_blur_sigma, value_parser = non_negative)]
    pub pv_blur_sigma: f64,
    #[arg(long, default_value_t = PhantomSpec::default().bias_amplitude, value_parser = non_negative)]
    pub bias_amplitude: f64,
}

impl PhantomArgs {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        let mut spec = PhantomSpec {
            size: self.size,
            noise_sigma: self.noise_sigma,
            pv_blur_sigma: self.pv_blur_sigma,
            bias_amplitude: self.bias_amplitude,
            seed,
            ..Default::default()
        };
        if let Some(m) = &self.tissue_means {
            spec.tissue_means.copy_from_slice(m);
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Unet,
    Unetpp,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Unet => Family::UNet,
            FamilyArg::Unetpp => Family::UNetPP,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// U-Net: pooling steps. U-Net++: backbone levels.
    #[arg(long, default_value_t = ArchConfig::default().depth)]
    pub depth: usize,
    #[arg(long, default_value_t = ArchConfig::default().base_filters)]
    pub base_filters: usize,
    /// Dropout probability (U-Net++ only).
    #[arg(long, default_value_t = ArchConfig::default().dropout_p, value_parser = non_negative)]
    pub dropout: f64,
    /// Supervise only the final U-Net++ output.
    #[arg(long)]
    pub no_deep_supervision: bool,
}

impl ArchArgs {
    pub fn config(&self, family: Family, in_channels: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            family,
            depth: self.depth,
            base_filters: self.base_filters,
            in_channels,
            num_classes,
            dropout_p: self.dropout,
            deep_supervision: !self.no_deep_supervision,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr, value_parser = positive)]
    pub lr: f64,
    /// Training share of the dataset.
    #[arg(long, default_value_t = TrainConfig::default().split_fraction, value_parser = open_unit)]
    pub split: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = non_negative)]
    pub min_delta: f64,
    /// Run every epoch and keep the final parameters.
    #[arg(long)]
    pub no_early_stop: bool,
}

impl TrainingArgs {
    pub fn config(&self, seed: u64, encode: Option<EncodeConfig>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            early_stop: if self.no_early_stop {
                EarlyStop::Off
            } else {
                EarlyStop::Patience {
                    patience: self.patience,
                    min_delta: self.min_delta,
                }
            },
            batch_size: self.batch_size,
            lr: self.lr,
            split_fraction: self.split,
            seed,
            encode,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "unet")]
    pub family: FamilyArg,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Input transform; `none` trains the raw-intensity baseline.
    #[arg(long, value_enum, default_value = "none")]
    pub negation: NegationKind,
    #[command(flatten)]
    pub params: NegationArgs,
    #[command(flatten)]
    pub membership: MembershipArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// The held-out part of the training-time split.
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`; its `.json` sidecar must sit next to it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Also write predicted label images.
    #[arg(long)]
    pub save_predictions: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "unet,unetpp")]
    pub families: Vec<FamilyArg>,
    /// Skip the raw-input baseline cells.
    #[arg(long)]
    pub no_baselines: bool,
    /// Sugeno grid; pass an empty string to skip.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.5,0.8,0.9,1.0,1.2,1.4,1.5,2.0,2.5"
    )]
    pub lambdas: Vec<String>,
    /// Yager grid; pass an empty string to skip.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,0.6,0.8,0.9")]
    pub alphas: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub membership: MembershipArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Summary CSV written by `ablate`.
    #[arg(long, required_unless_present = "reported")]
    pub summary: Option<PathBuf>,
    /// Also plot the bundled reported tables.
    #[arg(long)]
    pub reported: bool,
    /// Restrict to one metric.
    #[arg(long)]
    pub metric: Option<MetricArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Ac,
    Dc,
    Iou,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Ac => Metric::Ac,
            MetricArg::Dc => Metric::Dc,
            MetricArg::Iou => Metric::Iou,
        }
    }
}

/// Parses a grid list, where a lone empty entry means "no grid".
pub fn parse_grid(
    items: &[String],
    check: fn(&str) -> Result<f64, String>,
) -> Result<Vec<f64>, String> {
    items
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(check)
        .collect()
}

pub fn check_lambda(s: &str) -> Result<f64, String> {
    positive(s).map_err(|e| format!("lambda {e}"))
}

pub fn check_alpha(s: &str) -> Result<f64, String> {
    open_unit(s).map_err(|e| format!("alpha {e}"))
}

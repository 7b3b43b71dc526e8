use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segfuse_core::labels::Modality;

/// Default data directory when `--data` is omitted.
pub const DATA_ENV: &str = "SEGFUSE_DATA";

#[derive(Debug, Parser)]
#[command(name = "segfuse", version, about = "Multi-modal tumor segmentation pipeline")]
pub struct Cli {
    /// Worker threads for per-case and per-slice work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic multi-modal phantoms as case archives.
    Phantom(PhantomArgs),
    /// Clip, normalize, stack and crop raw volumes into case archives.
    Preprocess(PreprocessArgs),
    /// Train a model on the training side of a split.
    Train(TrainArgs),
    /// Segment one case archive.
    Infer(InferArgs),
    /// Score a checkpoint on held-out cases.
    Eval(EvalArgs),
    /// Train and evaluate every framework variant on one split.
    Ablate(AblateArgs),
    /// Render markdown tables and bar charts from report CSVs.
    Report(ReportArgs),
    /// Re-execute the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Volume size as DEPTHxHEIGHTxWIDTH.
    #[arg(long, default_value = "24x64x64", value_parser = parse_size)]
    pub size: (usize, usize, usize),
    /// Additive Gaussian noise standard deviation.
    #[arg(long, default_value_t = 5.0)]
    pub noise: f64,
    /// Keep every phantom at the nominal center and radii.
    #[arg(long)]
    pub fixed: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub lo: f64,
    #[arg(long, default_value_t = 99.5)]
    pub hi: f64,
    #[arg(long, value_parser = parse_modality)]
    pub single_modality: Option<Modality>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// k-fold cross-validation.
    #[arg(long, conflicts_with = "split")]
    pub cv: Option<usize>,
    /// Hold-out split, fraction of cases used for training.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// JSON file with training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_prompting: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_modality)]
    pub single_modality: Option<Modality>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Fold whose complement is trained on, with `--cv`.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Train on every case instead of the training side of a split.
    #[arg(long, conflicts_with_all = ["cv", "split"])]
    pub all: bool,
    /// Training history CSV (default: next to the checkpoint).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    /// Pixels added on each side of refinement boxes.
    #[arg(long)]
    pub margin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "case")]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub segment: SegmentArgs,
    /// Attention-weight CSV for this case.
    #[arg(long)]
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Score every case in `--data`, ignoring the training split.
    #[arg(long, conflicts_with_all = ["cv", "split"])]
    pub all: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub segment: SegmentArgs,
    /// Attention-weight CSV (default: next to the report).
    #[arg(long)]
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// JSON file with `train`, `model` and `segment` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Comma-separated subset of baseline,+attention,+prompting,full.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_parser = parse_modality)]
    pub single_modality: Option<Modality>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report CSVs produced by `eval` or `ablate`.
    #[arg(long = "reports", num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Attention-weight CSVs produced by `eval` or `infer`.
    #[arg(long = "attention", num_args = 1..)]
    pub attention: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected DEPTHxHEIGHTxWIDTH, got {s:?}"));
    }
    let n = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?} in {s:?}"));
    Ok((n(parts[0])?, n(parts[1])?, n(parts[2])?))
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e: segfuse_core::Error| e.to_string())
}

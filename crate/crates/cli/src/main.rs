//! `posekit` command-line entry point.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod overlay;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Usage problems exit with 1, bad or unreadable data with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<posekit_core::Error> for CliError {
    fn from(e: posekit_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "posekit", version, about = "Whole-body pose estimation toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// SimCC label encoding and decoding
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Overfit a small model on synthetic blob images
    TrainToy(TrainToyArgs),
    /// Teacher/student distillation on a synthetic corpus
    Distill(DistillArgs),
    /// Remap a COCO-style annotation file onto the 133-keypoint layout
    Convert(ConvertArgs),
    /// AP/AR per body part
    Eval(EvalArgs),
    /// Replay a detection trace through the inference pipeline
    PipelineSim(PipelineSimArgs),
    /// Per-stage latency of the inference path
    Bench(BenchArgs),
    /// Draw skeletons from an annotation file as SVG
    PlotOverlay(PlotOverlayArgs),
}

#[derive(Debug, Subcommand)]
pub enum CodecCommand {
    /// Encode keypoints into per-axis label vectors
    Encode(CodecEncodeArgs),
    /// Decode label vectors written by `encode`
    Decode(CodecDecodeArgs),
    /// Encode and decode random keypoints, reporting the worst error
    Roundtrip(CodecRoundtripArgs),
}

#[derive(Debug, Args)]
pub struct Geometry {
    /// Patch width in pixels
    #[arg(long = "w", default_value_t = 192)]
    pub w: usize,
    /// Patch height in pixels
    #[arg(long = "h", default_value_t = 256)]
    pub h: usize,
    /// Bins per pixel
    #[arg(long = "k", default_value_t = 2.0)]
    pub k: f64,
}

#[derive(Debug, Args)]
pub struct CodecEncodeArgs {
    #[command(flatten)]
    pub geometry: Geometry,
    /// Keypoint as `x,y`; repeat for several
    #[arg(long = "point", required = true, value_parser = parse_point)]
    pub points: Vec<[f64; 2]>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodecDecodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodecRoundtripArgs {
    #[command(flatten)]
    pub geometry: Geometry,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 8)]
    pub keypoints: usize,
    /// Pyramid levels fed to the head
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub instances: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Global gradient norm cap
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training summary
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    /// Corpus description (JSON)
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Feature loss weight (stage 1)
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Logit loss weight (stage 1)
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long)]
    pub linear_decay: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Student checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub mapping: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Source schema when the file does not name one (default: the mapping's source)
    #[arg(long)]
    pub schema: Option<String>,
    /// Dataset name recorded on each instance (default: input file stem)
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Schema when the ground truth file does not name one
    #[arg(long)]
    pub schema: Option<String>,
    /// Write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of the table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PipelineSimArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Pipeline configuration (JSON); defaults apply to missing fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel noise of the simulated estimator
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 17)]
    pub keypoints: usize,
    /// Instances per frame
    #[arg(long, default_value_t = 4)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverlaySource {
    Gt,
    Pred,
}

#[derive(Debug, Args)]
pub struct PlotOverlayArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Whether the input is a ground-truth file or a prediction list
    #[arg(long, value_enum, default_value_t = OverlaySource::Gt)]
    pub source: OverlaySource,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub image_id: Option<u64>,
    /// Canvas size as `WxH` (default: fit the keypoints)
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected x,y, got '{s}'"))?;
    let x: f64 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let y: f64 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    Ok([x, y])
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w = a.parse().map_err(|e| format!("{a}: {e}"))?;
    let h = b.parse().map_err(|e| format!("{b}: {e}"))?;
    Ok((w, h))
}

fn init_threads() {
    let Ok(v) = std::env::var("POSEKIT_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring POSEKIT_THREADS={v}"),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Data(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    std::process::exit(run(std::env::args_os()));
}

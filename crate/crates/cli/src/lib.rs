pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use darkship_core::Error;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "darkship", version, about = "SAR vessel detection: tiling, inference, scoring and benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the detector over a scene and write a detections CSV.
    Detect(DetectArgs),
    /// Score a detections CSV against labels and write a JSON report.
    Score(ScoreArgs),
    /// Quantize a float weight file on chips cut from scenes.
    Calibrate(CalibrateArgs),
    /// Search per-class, per-shore-zone score thresholds on raw detections.
    Thresholds(ThresholdsArgs),
    /// Generate a synthetic scene with its labels.
    Synth(SynthArgs),
    /// Time the pipeline stages and the throughput per worker count.
    Bench(BenchArgs),
    /// Write a seeded random weight file for a model.
    InitWeights(InitWeightsArgs),
    /// Print parameter and FLOP counts of a model.
    Count(CountArgs),
}

/// Settings shared by the commands that load a model or run the pipeline.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset, e.g. yolov8n-ghost-p2.
    #[arg(long)]
    pub model: Option<String>,
    /// Pixels shared by neighbouring chips.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Minimum best-class score for a cell to be decoded.
    #[arg(long)]
    pub conf_floor: Option<f64>,
    /// One threshold for every cell, or a JSON threshold table file.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Worker threads; defaults to DARKSHIP_WORKERS, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            overlap: self.overlap,
            nms_iou: self.nms_iou,
            conf_floor: self.conf_floor,
            thresholds: self.thresholds.clone(),
            workers: self.workers,
            radius_m: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Float,
    Quantized,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to quantized for calibrated weight files and float otherwise.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Skip the threshold table and add the shore distance column.
    #[arg(long)]
    pub raw: bool,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Match radius in metres.
    #[arg(long)]
    pub radius_m: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long = "scenes", num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Use at most this many chips, taken in scene order.
    #[arg(long)]
    pub max_chips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ThresholdsArgs {
    /// Raw detections, as written by `detect --raw`.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.05")]
    pub grid: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub radius_m: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub targets: usize,
    /// Mean open-water VV backscatter in dB.
    #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
    pub clutter_db: f64,
    #[arg(long)]
    pub scene_id: Option<String>,
    #[arg(long)]
    pub scene_out: PathBuf,
    #[arg(long)]
    pub labels_out: PathBuf,
    /// Allow scenes smaller than one chip; the pipeline pads them.
    #[arg(long)]
    pub allow_small: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Worker counts for the throughput sweep; defaults to the configured count.
    #[arg(long = "sweep", value_delimiter = ',')]
    pub sweep: Vec<usize>,
    /// Timed runs for the stage breakdown.
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Print a plain-text table instead of JSON.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Square input size for the FLOP count.
    #[arg(long, default_value_t = 640)]
    pub input: usize,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_)
        | Error::Config(_)
        | Error::Domain(_)
        | Error::Dimension { .. }
        | Error::MissingWeights(_)
        | Error::LayerMismatch { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => EXIT_IO,
        Error::Invariant(_) | Error::Numeric(_) => EXIT_INVARIANT,
    }
}

pub fn run(cli: Cli) -> darkship_core::Result<()> {
    match cli.command {
        Command::Detect(a) => commands::detect(&a),
        Command::Score(a) => commands::score(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Thresholds(a) => commands::thresholds(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::InitWeights(a) => commands::init_weights(&a),
        Command::Count(a) => commands::count(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(exit_code(&Error::Usage("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingWeights("head".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Parse {
                line: 3,
                reason: "x".into()
            }),
            EXIT_IO
        );
        assert_eq!(exit_code(&Error::Invariant("x".into())), EXIT_INVARIANT);
    }

    #[test]
    fn sweep_takes_a_comma_list() {
        let cli = Cli::try_parse_from([
            "darkship", "bench", "--scene", "s", "--weights", "w", "--sweep", "1,2,4",
        ])
        .unwrap();
        let Command::Bench(b) = cli.command else { panic!() };
        assert_eq!(b.sweep, [1, 2, 4]);
    }
}

//! `fudsa`: synthesize, preprocess, train, evaluate and predict with the
//! segmentation network from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const SEEDS: &str = "Seeds: every random choice derives from --seed. Phantom k uses seed+1000+k; \
model initialization uses seed; epoch e shuffles with (seed+1) xor e; the train/val split uses seed+2; \
gradcheck inputs use seed+3, sampled coordinates seed+4 and bias jitter seed+5.";

const EXIT_CODES: &str = "Exit codes: 0 success, 1 check failure, 2 usage or validation error, 3 numerical divergence. \
FUDSA_THREADS caps evaluation worker threads (default 1).";

#[derive(Parser, Debug)]
#[command(name = "fudsa", version, about = "Lesion segmentation with a deeply supervised attention encoder-decoder")]
#[command(after_help = format!("{SEEDS}\n\n{EXIT_CODES}"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic chest phantoms (raw HU greymaps) and their masks.
    #[command(after_help = SEEDS)]
    Synth(SynthArgs),
    /// Window, normalize, resize, drop lesion-free slices and split.
    #[command(after_help = SEEDS)]
    Preprocess(PreprocessArgs),
    /// Train on a preprocessed dataset.
    #[command(after_help = SEEDS)]
    Train(TrainArgs),
    /// Print pooled metrics of a checkpoint on one split as CSV.
    Eval(EvalArgs),
    /// Segment one image into a binary mask greymap.
    Predict(PredictArgs),
    /// Compare backpropagated gradients against central differences.
    #[command(after_help = SEEDS)]
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder depth the size must suit (divisible by 2^levels).
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long, default_value_t = 1)]
    pub min_lesions: usize,
    #[arg(long, default_value_t = 3)]
    pub max_lesions: usize,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = -1000.0, allow_hyphen_values = true)]
    pub lo_hu: f64,
    #[arg(long, default_value_t = 170.0, allow_hyphen_values = true)]
    pub hi_hu: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key = value config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// full, I (spatial attention only), II (no deep supervision) or III (no decoder residuals).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Run config; defaults to <checkpoint>.cfg, then config.cfg beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw HU greymap (.pgm) or normalized tensor (.ften).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write channel weights and spatial gates of every level here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Run config; defaults to <checkpoint>.cfg, then config.cfg beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// f32 or f64.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    /// Pass threshold; 1e-5 for f64 and 5e-2 for f32 when omitted.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fudsa::Error>() {
        Some(fudsa::Error::NumericalDivergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

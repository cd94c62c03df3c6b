//! `atd`: train, evaluate, run and inspect the adaptive token dictionary
//! network, plus the gradient-check and sparse-coding suites.
//!
//! Flags override values from `--config`, which override built-in defaults.
//! Worker threads are capped by the `ATD_THREADS` environment variable.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "atd", version, about = "Adaptive token dictionary super-resolution")]
pub struct Cli {
    /// Seed for initialisation, synthetic data and random probes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON training config; its `model` section also selects the network
    /// for the other commands.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub outdir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on synthetic patches or given HQ images; writes a JSON-lines
    /// log and checkpoints.
    Train(TrainArgs),
    /// Degrade HQ images, restore them with a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Upscale one PNG.
    Infer(InferArgs),
    /// Dump routing statistics of one dictionary layer.
    InspectAttn(InspectArgs),
    /// Category attention against global attention: FLOPs and wall time.
    Bench(BenchArgs),
    /// Finite-difference checks of every module and of a whole model.
    Gradcheck(GradcheckArgs),
    /// Sparse-coding suite and the lasso/attention comparison.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// micro, light or full.
    #[arg(long)]
    pub preset: Option<String>,
    /// baseline, tdca, acmsa or full.
    #[arg(long)]
    pub branches: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// l1 or charbonnier.
    #[arg(long)]
    pub loss: Option<String>,
    /// Side of the synthetic HQ patches.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of synthetic pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// HQ training images; replaces the synthetic patches.
    #[arg(long = "hq")]
    pub hq: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MetricArgs {
    /// y (BT.601 luma) or rgb.
    #[arg(long, default_value = "y")]
    pub mode: String,
    /// Pixels dropped from every border before scoring.
    #[arg(long, default_value_t = 0)]
    pub crop_border: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Score plain bicubic upsampling instead of a checkpoint (needs --scale).
    #[arg(long)]
    pub bicubic: bool,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long = "hq", required = true)]
    pub hq: Vec<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to `<outdir>/sr.png`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Must match the checkpoint's scale when given.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Ground truth for PSNR/SSIM.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Without a checkpoint a freshly initialised model is inspected.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// LQ input; defaults to a degraded synthetic patch.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Index among the layers that carry a dictionary branch.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "light")]
    pub preset: String,
    /// Feature-map sides; each gives side^2 tokens.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Global attention is only timed up to this many tokens.
    #[arg(long, default_value_t = 4096)]
    pub global_max_tokens: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    pub preset: String,
    /// Side of the random input image.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = atd_core::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Only the per-module suite.
    #[arg(long)]
    pub skip_model: bool,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Also print the closed-form fixture and the analogy table.
    #[arg(long)]
    pub demo: bool,
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

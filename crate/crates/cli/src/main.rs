//! `lfod`: train a feature denoiser, score, evaluate, generate synthetic
//! features and inspect artifacts.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "lfod",
    version,
    about = "OOD detection by layer-wise feature diffusion reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random draw; 0 when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch work.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on an ID feature file; writes the epoch-1 and final checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a feature file and write the per-sample CSV.
    Score(ScoreArgs),
    /// AUROC and FPR95 from score CSVs, as JSON.
    Eval {
        /// Score CSVs; may be repeated.
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        /// mse, lr or mfsim.
        #[arg(long, default_value = "mfsim")]
        head: String,
        /// Optional `sample_id,label` CSV overriding the score files' labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic train / ID-test / OOD-test feature files.
    Synth(SynthArgs),
    /// Describe a feature file, checkpoint or score CSV.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Final checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Epoch-1 checkpoint, needed by the lr head.
    #[arg(long = "ckpt-initial")]
    ckpt_initial: Option<PathBuf>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// mse, lr, mfsim, a comma list, or all.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// random or fixed:<s>.
    #[arg(long)]
    stride: Option<String>,
    /// variance or stddev scaling of the fresh noise term.
    #[arg(long = "noise-exponent")]
    noise_exponent: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Threshold; adds a decision column for the first selected head.
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long = "n-train", default_value_t = 2048)]
    n_train: usize,
    #[arg(long = "n-ood", default_value_t = 512)]
    n_ood: usize,
    /// Defaults to the OOD count.
    #[arg(long = "n-test-id")]
    n_test_id: Option<usize>,
    #[arg(long, default_value_t = 6.0)]
    shift: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("LFOD_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(k) = threads {
        if k == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            features,
            out,
            common,
        } => {
            set_threads(common.threads)?;
            commands::train(config.as_deref(), features, out, common.seed)
        }
        Command::Score(args) => {
            set_threads(args.common.threads)?;
            commands::score(args)
        }
        Command::Eval {
            scores,
            head,
            labels,
            out,
        } => commands::eval(&scores, &head, labels.as_deref(), out.as_deref()),
        Command::Synth(args) => commands::synth(args),
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

/// Noise-robust cross-lingual cross-modal retrieval lab.
#[derive(Parser)]
#[command(name = "nrccr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent experiment cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic bilingual corpus.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a corpus; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Triplet objective only.
        #[arg(long)]
        basic: bool,
    },
    /// Evaluate a checkpoint on the test split; writes a metrics JSON.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        group_by_length: bool,
        /// Add cross-lingual text-to-text mAP.
        #[arg(long)]
        t2t: bool,
    },
    /// Full vs basic model over training-noise levels.
    SweepNoise {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated, e.g. 0.2,0.5.
        #[arg(long)]
        rhos: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        /// Target captions pass through the channel three times.
        #[arg(long)]
        compound: bool,
    },
    /// The six-row component ablation on one corpus.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// TSV of video and caption embeddings for a sample of test videos.
    DumpEmbeddings {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

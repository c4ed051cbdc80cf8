use clap::{Parser, Subcommand};
use scd_net::cli::{cmd_eval, cmd_gen_synth, cmd_pretrain, exit_code, EvalArgs, GenSynthArgs, PretrainArgs};
use std::path::PathBuf;
use std::process::ExitCode;

/// Self-supervised skeleton action representation learning.
#[derive(Parser)]
#[command(name = "scd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining; writes config snapshot, metrics.csv and checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written under the same config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Downstream evaluation of a pretrained checkpoint; writes a results JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// probe, retrieval, semi or transfer
        #[arg(long)]
        task: String,
        /// Defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic corpus (manifest.tsv + .skel files).
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Pretrain { config, checkpoint, seed, out } => {
            cmd_pretrain(&PretrainArgs { config, checkpoint, seed, out }).map(|dir| dir.display().to_string())
        }
        Command::Eval { checkpoint, task, config, seed, out } => {
            cmd_eval(&EvalArgs { checkpoint, config, task, seed, out }).map(|(r, path)| {
                let top5 = r.top5.map(|v| format!("  top-5 {v:.4}")).unwrap_or_default();
                format!("{}: top-1 {:.4}{top5}\n{}", r.task, r.top1, path.display())
            })
        }
        Command::GenSynth { config, classes, per_class, seed, out } => {
            cmd_gen_synth(&GenSynthArgs { config, classes, per_class, seed, out }).map(|dir| dir.display().to_string())
        }
    };
    match outcome {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

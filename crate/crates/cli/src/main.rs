use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use moncae_cli::commands::{cmd_evolve, cmd_finetune, cmd_hv, cmd_report};
use moncae_core::ReferencePoint;

/// Multi-objective neuroevolution of convolutional autoencoders.
#[derive(Parser)]
#[command(name = "moncae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary search once per configured seed.
    Evolve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Retrain one evolved genome for extra epochs and save its weights.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        genome: String,
    },
    /// Write original/reconstruction pixmaps and a loss summary per genome.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Config file whose `[dataset]` section describes the data.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        n: usize,
        /// Restrict to these genome ids (default: every finetuned genome).
        #[arg(long)]
        genome: Vec<String>,
    },
    /// Hypervolume and per-point contributions of a rec_loss,loc CSV.
    Hv {
        #[arg(long)]
        points: PathBuf,
        #[arg(long = "ref", num_args = 2, value_names = ["REC_LOSS", "LOC"], default_values_t = [4.0, 12.0])]
        reference: Vec<f64>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evolve { config, output } => cmd_evolve(&config, output.as_deref()),
        Command::Finetune {
            config,
            run,
            genome,
        } => cmd_finetune(&config, &run, &genome),
        Command::Report {
            run,
            dataset,
            n,
            genome,
        } => cmd_report(&run, &dataset, n, &genome),
        Command::Hv { points, reference } => {
            let reference = ReferencePoint::new(reference[0], reference[1])?;
            cmd_hv(&points, reference, std::io::stdout().lock())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

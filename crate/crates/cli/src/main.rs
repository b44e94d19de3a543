//! `nearnd`: run the novelty-detection pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nearnd::pipeline::{Overrides, Pipeline, Status};
use nearnd::sde::FidBand;

#[derive(Parser, Debug)]
#[command(name = "nearnd", version, about = "Near-distribution novelty detection pipeline")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to $ND_RUNS_DIR/<name> or runs/<name>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// FID band as lo:hi.
    #[arg(long, global = true, value_parser = parse_band)]
    band: Option<FidBand>,
    /// Neighbours used by the novelty score.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the score model until a probe lands in the FID band.
    GenTrain,
    /// Write samples of the selected checkpoint as PNG files.
    GenSample {
        /// Number of samples; defaults to generator.num_samples.
        #[arg(long)]
        n: Option<usize>,
        /// Output directory; defaults to <run>/samples.
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Fine-tune the backbone against the generated samples.
    Finetune,
    /// Embed the normal training class into a memory bank.
    BuildMemory,
    /// Score the evaluation split, or every image in --input.
    Score {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate the detector under the configured protocol.
    Eval,
    /// Closeness scores of the abnormal classes.
    Closeness,
}

fn parse_band(s: &str) -> Result<FidBand, String> {
    FidBand::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> nearnd::Result<Status> {
    let config = cli
        .config
        .ok_or_else(|| nearnd::Error::Config("--config <FILE> is required".into()))?;
    let overrides = Overrides { seed: cli.seed, out: cli.out, band: cli.band, k: cli.k };
    let pipeline = Pipeline::open(&config, &overrides)?;
    let summary = match cli.command {
        Command::GenTrain => pipeline.gen_train()?,
        Command::GenSample { n, to } => pipeline.gen_sample(n, to.as_deref())?,
        Command::Finetune => pipeline.finetune()?,
        Command::BuildMemory => pipeline.build_memory()?,
        Command::Score { input } => pipeline.score(input.as_deref())?,
        Command::Eval => pipeline.eval()?,
        Command::Closeness => pipeline.closeness()?,
    };
    match summary.status {
        Status::Ok => println!("{}", summary.message),
        Status::BandNotReached => eprintln!("{}", summary.message),
    }
    for a in &summary.artifacts {
        println!("  {}", a.display());
    }
    Ok(summary.status)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::BandNotReached) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

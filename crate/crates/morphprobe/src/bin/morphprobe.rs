use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use morphprobe::config::parse_seed_override;
use morphprobe::{Experiment, Options, Pipeline, Result};
use morphprobe_core::embedding::LayerId;

#[derive(Parser)]
#[command(name = "morphprobe", version, about = "Multilabel morphosyntactic probing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse corpora, build label spaces and vocabularies, materialize embedding caches
    Ingest(Common),
    /// Generate control-task assignments
    Control(Common),
    /// Train diagnostic and control probes for every cell
    Train(Common),
    /// Evaluate probes on test data; selectivity, IV/OOV, filters, predictions
    Eval(Common),
    /// Zero-shot evaluation on held-out languages
    Transfer(Common),
    /// Consolidate reports and plot-ready CSVs
    Report(Common),
    /// All of the above in order
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Redo cells whose outputs already exist
    #[arg(long)]
    force: bool,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Only process these layers (repeatable)
    #[arg(long = "layer")]
    layers: Vec<i64>,
    /// Override a seed, e.g. --seed control=8 (repeatable)
    #[arg(long = "seed", value_parser = parse_seed_override)]
    seeds: Vec<(String, u64)>,
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let exp = Experiment::load(&c.config, &c.seeds)?;
    let layers = if c.layers.is_empty() {
        None
    } else {
        Some(
            c.layers
                .iter()
                .map(|&l| LayerId::new(l).map_err(|e| morphprobe::Error::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Pipeline::new(
        exp,
        Options {
            force: c.force,
            jobs: c.jobs,
            layers,
        },
    )
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage): (&Common, fn(&Pipeline) -> Result<()>) = match &cli.command {
        Command::Ingest(c) => (c, Pipeline::ingest),
        Command::Control(c) => (c, Pipeline::control),
        Command::Train(c) => (c, Pipeline::train),
        Command::Eval(c) => (c, Pipeline::eval),
        Command::Transfer(c) => (c, Pipeline::transfer),
        Command::Report(c) => (c, Pipeline::report),
        Command::Run(c) => (c, Pipeline::run),
    };
    let p = pipeline(common)?;
    stage(&p)?;
    println!("{}", p.root.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

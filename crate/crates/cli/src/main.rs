use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forge_cli::{execute, CliError, Command, Context, ExperimentConfig};

#[derive(Parser)]
#[command(name = "forge", version, about = "Train splicing-detector variants and rank them by latent margins")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; defaults to $FORGE_OUT, then the config's output_root.
    #[arg(long, global = true, env = "FORGE_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for sweeps and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Overrides the global seed and every seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the source and target datasets.
    Synth,
    /// Train every sweep variant.
    Sweep,
    /// Compute latent-margin reports.
    Margins,
    /// Measure gaps and build metric/gap pairs and quantile curves.
    Evaluate,
    /// Rank variants by the margin metric and write the report.
    Rank,
    /// Render quantile curves as SVG.
    Plot,
    /// All of the above.
    RunAll,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
        config.validate()?;
    }
    let out = cli
        .out
        .or_else(|| config.output_root.clone())
        .unwrap_or_else(|| PathBuf::from("forge-out"));
    let jobs = cli.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let command = match cli.command {
        Cmd::Synth => Command::Synth,
        Cmd::Sweep => Command::Sweep,
        Cmd::Margins => Command::Margins,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Rank => Command::Rank,
        Cmd::Plot => Command::Plot,
        Cmd::RunAll => Command::RunAll,
    };
    execute(command, &Context::new(config, out, jobs))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

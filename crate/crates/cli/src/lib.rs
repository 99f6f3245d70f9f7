//! Command-line frontend: config-driven synthesis, sweep, margins,
//! evaluation, ranking and plotting over one output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod workspace;

pub use commands::{
    cmd_evaluate, cmd_margins, cmd_plot, cmd_rank, cmd_run_all, cmd_sweep, cmd_synth, Context,
};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use workspace::Workspace;

/// A pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Sweep,
    Margins,
    Evaluate,
    Rank,
    Plot,
    RunAll,
}

/// Runs `command` under the output-root lock and returns a short summary.
pub fn execute(command: Command, ctx: &Context) -> CliResult<String> {
    let _lock = ctx.workspace.lock()?;
    Ok(match command {
        Command::Synth => json(&cmd_synth(ctx)?),
        Command::Sweep => json(&cmd_sweep(ctx)?),
        Command::Margins => json(&cmd_margins(ctx)?),
        Command::Evaluate => json(&cmd_evaluate(ctx)?),
        Command::Rank => cmd_rank(ctx)?.report,
        Command::Plot => json(&cmd_plot(ctx)?),
        Command::RunAll => {
            let s = cmd_run_all(ctx)?;
            format!(
                "{}\n{}",
                s.rank.report,
                serde_json::json!({
                    "synth": s.synth,
                    "sweep": s.sweep,
                    "margins": s.margins,
                    "evaluate": s.evaluate,
                    "plots": s.plots,
                })
            )
        }
    })
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("summaries serialize")
}

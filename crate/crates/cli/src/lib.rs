//! The `stgnf` command-line pipeline: `gen`, `train`, `score`, `eval`, `inspect`.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use args::{Cli, Command};
use error::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => commands::cmd_gen(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Score(a) => commands::cmd_score(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Inspect(a) => commands::cmd_inspect(a),
    }
}

/// Size the global worker pool from `STGNF_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("STGNF_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        error::usage_msg(format!(
            "STGNF_THREADS must be a positive integer, got '{value}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(error::CliError::runtime)
}

//! The `trofi` command line: one subcommand per pipeline stage, the
//! multi-seed experiment driver, and the ranking server.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod server;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{Cli, Command};
use crate::commands::Outcome;
use crate::error::{CliError, Result};
use crate::manifest::{record_stage, StageRecord};

/// Overrides fields of `args` with the keys of `table`. Keys may use
/// dashes or underscores; unknown keys are a usage error.
pub fn overlay<T: Serialize + DeserializeOwned>(args: &T, table: &toml::Table) -> Result<T> {
    let mut value = serde_json::to_value(args)?;
    let obj = value.as_object_mut().expect("argument structs serialize as maps");
    for (key, v) in table {
        let field = key.replace('-', "_");
        let field = if field == "in" { "input".to_string() } else { field };
        if !obj.contains_key(&field) {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        let v = serde_json::to_value(v).map_err(|e| CliError::Usage(format!("config key {key:?}: {e}")))?;
        obj.insert(field, v);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// Applies a TOML config file to the parsed command.
pub fn apply_config(command: Command, path: &Path) -> Result<Command> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    Ok(match command {
        Command::GenData(a) => Command::GenData(overlay(&a, &table)?),
        Command::Rank(a) => Command::Rank(overlay(&a, &table)?),
        Command::TrainReward(a) => Command::TrainReward(overlay(&a, &table)?),
        Command::Label(a) => Command::Label(overlay(&a, &table)?),
        Command::TrainPolicy(a) => Command::TrainPolicy(overlay(&a, &table)?),
        Command::Evaluate(a) => Command::Evaluate(overlay(&a, &table)?),
        Command::Analyze(a) => Command::Analyze(overlay(&a, &table)?),
        Command::Pipeline(a) => Command::Pipeline(overlay(&a, &table)?),
        Command::ServeRank(a) => Command::ServeRank(overlay(&a, &table)?),
    })
}

fn staged<A: Serialize>(name: &str, out: &Path, args: &A, f: impl FnOnce(&A) -> Result<Outcome>) -> Result<Outcome> {
    let start = Instant::now();
    let outcome = f(args)?;
    record_stage(
        out,
        StageRecord {
            command: name.into(),
            key: outcome.key.clone(),
            config: serde_json::to_value(args)?,
            metrics: outcome.metrics.clone(),
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(outcome)
}

/// Runs one command and records it in the output directory's manifest.
pub fn execute(command: &Command) -> Result<()> {
    let name = command.name();
    let outcome = match command {
        Command::GenData(a) => staged(name, &a.out, a, commands::gen_data)?,
        Command::Rank(a) => staged(name, &a.out, a, commands::rank)?,
        Command::TrainReward(a) => staged(name, &a.out, a, commands::train_reward)?,
        Command::Label(a) => staged(name, &a.out, a, commands::label)?,
        Command::TrainPolicy(a) => staged(name, &a.out, a, commands::train_policy)?,
        Command::Evaluate(a) => staged(name, &a.out, a, commands::evaluate)?,
        Command::Analyze(a) => staged(name, &a.out, a, commands::analyze)?,
        Command::Pipeline(a) => {
            let results = pipeline::run_pipeline(a)?;
            print!("{}", results.to_markdown());
            return Ok(());
        }
        Command::ServeRank(a) => return server::serve(a),
    };
    println!("{}", outcome.summary.trim_end());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let command = match &cli.config {
        Some(path) => apply_config(cli.command, path)?,
        None => cli.command,
    };
    execute(&command)
}

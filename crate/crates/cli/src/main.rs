//! `amid`: experiment runner for mean-field incentive design.

mod commands;
mod config;
mod output;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::Context_;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "amid", version, about = "Incentive design in mean-field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run OMD and record exploitability per step and the final flow.
    Solve(RunArgs),
    /// Train θ and record the validation curve.
    Design(RunArgs),
    /// Compare finite-population revenue with the mean-field value.
    #[command(name = "simulate-n")]
    SimulateN(RunArgs),
    /// Compare the adjoint gradient with central differences.
    Gradcheck(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<bool> {
    let (name, args) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Design(a) => ("design", a),
        Command::SimulateN(a) => ("simulate-n", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = RunConfig::parse(&text)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cx = Context_ {
        cfg: &cfg,
        text: &text,
        value,
        seed: args.seed.unwrap_or(cfg.training.seed),
        out: &out,
    };
    log::info!("{name} writing to {}", out.display());
    match cli.command {
        Command::Solve(_) => commands::solve(&cx).map(|()| true),
        Command::Design(_) => commands::design(&cx).map(|()| true),
        Command::SimulateN(_) => commands::simulate_n(&cx).map(|()| true),
        Command::Gradcheck(_) => commands::gradcheck(&cx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded the tolerance");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

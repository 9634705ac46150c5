mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mqar", version, about = "Multi-query associative recall experiments", args_override_self = true)]
pub struct Cli {
    /// Global seed; components draw from named sub-streams of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MQAR_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Where to write the run manifest (default: next to the output, or stderr).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate MQAR records.
    Gen(commands::GenArgs),
    /// Relabel a dataset with the reference oracles and check agreement.
    Oracle(commands::OracleArgs),
    /// Check every exact-weight construction against its reference.
    VerifyConstructions(commands::VerifyArgs),
    /// Train models over a (variant, length, width) grid.
    Sweep(commands::SweepArgs),
    /// Slice perplexity by recall hits and attribute the gap between two models.
    Slice(commands::SliceArgs),
    /// Estimate training FLOPs.
    Flops(commands::FlopsArgs),
}

#[derive(Serialize)]
struct Globals {
    seed: u64,
    jobs: usize,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::expand_argv(&Cli::command(), argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let globals = serde_json::to_value(Globals { seed: cli.seed, jobs: cli.jobs }).expect("plain struct");
    match commands::run(&cli, globals) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

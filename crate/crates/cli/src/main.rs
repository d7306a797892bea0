//! `crowdlend`: command-line pipeline for loan-default scoring, machine-vs-
//! crowd portfolio comparison, and fairness auditing.

mod commands;
mod context;
mod output;

use clap::Parser;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "crowdlend",
    version,
    about = "Credit-risk scoring, portfolio evaluation, and fairness toolkit",
    after_help = "Every command writes CSV/JSON artifacts plus a run manifest into --out-dir.\n\
                  Flag values override --config file entries (flat `key = value` lines),\n\
                  which override built-in defaults."
)]
struct Cli {
    /// Flat key-value config file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    /// Seed for every random choice in the run.
    #[arg(long, global = true, env = "CROWDLEND_SEED")]
    seed: Option<u64>,

    /// Output directory for artifacts [default: out].
    #[arg(long, global = true)]
    out_dir: Option<std::path::PathBuf>,

    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = match context::RunContext::new(cli.config.as_deref(), cli.seed, cli.out_dir.clone())
    {
        Ok(ctx) => ctx,
        Err(err) => {
            eprintln!("error: invalid config: {err:#}");
            return ExitCode::from(2);
        }
    };
    match commands::run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CommandError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(commands::CommandError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

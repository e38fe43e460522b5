use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dvagen::commands::{cmd_chat, cmd_eval, cmd_serve, cmd_train};
use dvagen::{AppConfig, AppResult};

#[derive(Parser)]
#[command(
    name = "dvagen",
    version,
    about = "Dynamic-vocabulary generation: train, eval, chat, serve"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.steps=50`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Score generations on the test file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Add throughput and stage-profile tables and charts.
        #[arg(long)]
        benchmark: bool,
    },
    /// Interactive generation from stdin.
    Chat(Common),
    /// Serve the HTTP API.
    Serve(Common),
}

fn run(cli: Cli) -> AppResult<i32> {
    let load = |c: &Common| AppConfig::load(&c.config, &c.overrides);
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Train(c) => cmd_train(&load(&c)?, &mut stdout).map(|_| 0),
        Command::Eval { common, benchmark } => {
            cmd_eval(&load(&common)?, benchmark, &mut stdout).map(|_| 0)
        }
        Command::Chat(c) => cmd_chat(&load(&c)?, io::stdin().lock(), stdout),
        Command::Serve(c) => cmd_serve(&load(&c)?).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

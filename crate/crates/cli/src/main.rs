use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    checklist_rl_cli::run(checklist_rl_cli::Cli::parse())
}

//! Command-line front end: `validate`, `filter`, `rollout`, `train` and
//! `report`, sharing one config file and a set of override flags.
//!
//! Exit codes are a stable contract: 0 on success, 1 when validation or
//! an acceptance check fails, 2 on operational failure.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use checklist_rl::advantage::{Granularity, NormalizerSpec};
use checklist_rl::datapipe::FilterRule;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{parse_normalizer, parse_rules, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Unreadable input or config.
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Violations found or checks failed.
    Failure,
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RuleList(pub Vec<FilterRule>);

#[derive(Debug, Parser)]
#[command(name = "checklist-rl", version, about = "Checklist rewards and group advantages for tool-use agents")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config; absent sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Rollout seed, or first training seed (the seed count is kept).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rollouts per group.
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// trajectory, turn or step.
    #[arg(long, global = true, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    /// Label-flip probability of the judge.
    #[arg(long, global = true)]
    pub judge_noise: Option<f64>,
    /// constant, std or std:<epsilon>.
    #[arg(long, global = true, value_parser = parse_normalizer)]
    pub normalizer: Option<NormalizerSpec>,
    /// Comma-separated filter rules to apply, e.g. 5,6.
    #[arg(long, global = true, value_parser = parse_rule_list)]
    pub rules: Option<RuleList>,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse()
}

fn parse_rule_list(s: &str) -> Result<RuleList, String> {
    parse_rules(s).map(RuleList)
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            group_size: self.group_size,
            granularity: self.granularity,
            judge_noise: self.judge_noise,
            normalizer: self.normalizer,
            rules: self.rules.clone().map(|r| r.0),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check dialogues, checklists and predicates; exit 1 on violations.
    Validate {
        dialogues: PathBuf,
        #[arg(long)]
        checklists: Option<PathBuf>,
        #[arg(long)]
        predicates: Option<PathBuf>,
    },
    /// Apply the structural filter rules to a dialogue stream.
    Filter { input: PathBuf },
    /// Roll out a policy on annotated dialogues and score the groups.
    Rollout {
        dialogues: PathBuf,
        #[arg(long)]
        checklists: PathBuf,
        /// Scripted judge predicates; unused with an external judge.
        #[arg(long)]
        predicates: Option<PathBuf>,
    },
    /// Train the toy agent over the configured sweep.
    Train,
    /// Summarize learning curves and evaluate configured checks.
    Report {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Filter { .. } => "filter",
            Command::Rollout { .. } => "rollout",
            Command::Train => "train",
            Command::Report { .. } => "report",
        }
    }
}

/// Caps the global thread pool from `CHECKLIST_RL_THREADS`.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("CHECKLIST_RL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Input(format!("CHECKLIST_RL_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn run(cli: Cli) -> ExitCode {
    let result = configure_threads().and_then(|()| commands::dispatch(&cli));
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

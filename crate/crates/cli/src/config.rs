//! The run configuration: one TOML file with a section per command, plus
//! flag overrides. Every default lives here and is echoed into the run
//! manifest.

use std::path::{Path, PathBuf};

use checklist_rl::advantage::{Granularity, NormalizerSpec};
use checklist_rl::datapipe::{FilterConfig, FilterRule};
use checklist_rl::endpoint::Endpoint;
use checklist_rl::reward::TurnDenominator;
use checklist_rl::rollout::RolloutBudget;
use checklist_rl::toyrl::{TaskParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::report::Check;
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub filter: FilterConfig,
    pub rollout: RolloutSection,
    pub train: TrainConfig,
    pub task: TaskParams,
    pub sweep: Sweep,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    /// Replays the reference dialogue's actions.
    Reference,
    /// Replies with fixed text and never calls tools.
    Reply(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorChoice {
    Echo,
    /// JSON map of tool name to response template.
    Templates(PathBuf),
    External(Endpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub policy: PolicyChoice,
    pub group_size: usize,
    pub seed: u64,
    pub judge_noise: f64,
    pub judge_retries: u32,
    /// Replaces the scripted predicates when set.
    pub judge_endpoint: Option<Endpoint>,
    pub simulator: SimulatorChoice,
    pub budget: RolloutBudget,
    pub denominator: TurnDenominator,
    pub normalizer: NormalizerSpec,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            policy: PolicyChoice::Reference,
            group_size: 1,
            seed: 0,
            judge_noise: 0.0,
            judge_retries: 2,
            judge_endpoint: None,
            simulator: SimulatorChoice::Echo,
            budget: RolloutBudget::default(),
            denominator: TurnDenominator::default(),
            normalizer: NormalizerSpec::default(),
        }
    }
}

/// Lists fanned out over by `train`; an absent list means the single
/// value from `[train]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub granularities: Option<Vec<Granularity>>,
    pub group_sizes: Option<Vec<usize>>,
    pub judge_noises: Option<Vec<f64>>,
}

impl Sweep {
    /// One training config per combination, in a fixed order.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let grans = self.granularities.clone().unwrap_or_else(|| vec![base.granularity]);
        let sizes = self.group_sizes.clone().unwrap_or_else(|| vec![base.group_size]);
        let noises = self.judge_noises.clone().unwrap_or_else(|| vec![base.judge_noise]);
        let mut out = Vec::new();
        for &granularity in &grans {
            for &group_size in &sizes {
                for &judge_noise in &noises {
                    out.push(TrainConfig {
                        granularity,
                        group_size,
                        judge_noise,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Early checkpoint as a fraction of the final update.
    pub early_fraction: f64,
    pub checks: Vec<Check>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            early_fraction: 0.1,
            checks: Vec::new(),
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub group_size: Option<usize>,
    pub granularity: Option<Granularity>,
    pub judge_noise: Option<f64>,
    pub normalizer: Option<NormalizerSpec>,
    pub rules: Option<Vec<FilterRule>>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = crate::read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.rollout.seed = seed;
            let n = self.train.seeds.len().max(1) as u64;
            self.train.seeds = (seed..seed + n).collect();
        }
        if let Some(g) = o.group_size {
            self.rollout.group_size = g;
            self.train.group_size = g;
            self.sweep.group_sizes = None;
        }
        if let Some(g) = o.granularity {
            self.train.granularity = g;
            self.sweep.granularities = None;
        }
        if let Some(e) = o.judge_noise {
            self.rollout.judge_noise = e;
            self.train.judge_noise = e;
            self.sweep.judge_noises = None;
        }
        if let Some(n) = o.normalizer {
            self.rollout.normalizer = n;
            self.train.normalizer = n;
        }
        if let Some(rules) = &o.rules {
            self.filter.rules = rules.iter().copied().collect();
        }
    }
}

/// `constant`, `std` or `std:<epsilon>`.
pub fn parse_normalizer(s: &str) -> Result<NormalizerSpec, String> {
    match s.split_once(':') {
        None if s == "constant" => Ok(NormalizerSpec::constant()),
        None if s == "std" => Ok(NormalizerSpec::std_dev(1e-8)),
        Some(("std", eps)) => eps
            .parse::<f64>()
            .ok()
            .filter(|e| *e >= 0.0)
            .map(NormalizerSpec::std_dev)
            .ok_or_else(|| format!("bad epsilon `{eps}`")),
        _ => Err(format!("unknown normalizer `{s}`; use constant, std or std:<epsilon>")),
    }
}

/// Comma-separated rule numbers, e.g. `5,6`.
pub fn parse_rules(s: &str) -> Result<Vec<FilterRule>, String> {
    s.split(',')
        .map(|part| {
            let n: u8 = part.trim().parse().map_err(|_| format!("bad rule number `{part}`"))?;
            FilterRule::try_from(n)
        })
        .collect()
}

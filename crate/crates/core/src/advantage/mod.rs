//! Group-relative advantages at trajectory, turn and step granularity.
//!
//! A group holds `G` rollouts of the same annotated dialogue. Every
//! advantage is attached to a span `(rollout, turn, step)`, where `step`
//! counts agent actions within the turn; all tokens of a span share its
//! value.

pub mod oracle;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checklist::Checklist;
use crate::reward::{
    eligible_items, reward_grid, turn_reward, RewardError, RewardGrid, RewardSummary,
    SatisfactionTrace, TurnDenominator,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("group of {0} rollouts is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("instance exceeds the brute-force limits: {0}")]
    InstanceTooLarge(String),
    #[error("no checklist for turn {0}")]
    MissingChecklist(u32),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizerKind {
    StdDev,
    #[default]
    Constant1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub kind: NormalizerKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for NormalizerSpec {
    fn default() -> Self {
        Self::constant()
    }
}

impl NormalizerSpec {
    pub fn constant() -> Self {
        Self {
            kind: NormalizerKind::Constant1,
            epsilon: default_epsilon(),
        }
    }

    pub fn std_dev(epsilon: f64) -> Self {
        Self {
            kind: NormalizerKind::StdDev,
            epsilon,
        }
    }
}

/// Denominator of a group advantage: 1, or the population standard
/// deviation plus epsilon.
pub fn normalize(values: &[f64], spec: NormalizerSpec) -> f64 {
    match spec.kind {
        NormalizerKind::Constant1 => 1.0,
        NormalizerKind::StdDev => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() + spec.epsilon
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    Trajectory,
    Turn,
    Step,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Trajectory, Granularity::Turn, Granularity::Step];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Trajectory => "trajectory",
            Granularity::Turn => "turn",
            Granularity::Step => "step",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown granularity `{s}`"))
    }
}

/// Rewards of one turn of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRewards {
    pub trace: SatisfactionTrace,
    pub grid: RewardGrid,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRewards {
    /// Turns the rollout started, keyed by turn index.
    pub turns: BTreeMap<u32, TurnRewards>,
    pub summary: RewardSummary,
}

impl RolloutRewards {
    /// Computes grids and rewards from latched traces.
    pub fn from_traces(
        checklists: &BTreeMap<u32, Checklist>,
        traces: Vec<SatisfactionTrace>,
        reference_turns: usize,
        denominator: TurnDenominator,
    ) -> Result<Self, AdvantageError> {
        let mut turns = BTreeMap::new();
        for trace in traces {
            let cl = checklists
                .get(&trace.turn_index)
                .ok_or(AdvantageError::MissingChecklist(trace.turn_index))?;
            let grid = reward_grid(&trace, cl);
            let reward = turn_reward(&grid, cl);
            turns.insert(trace.turn_index, TurnRewards { trace, grid, reward });
        }
        let per_turn = turns.iter().map(|(t, r)| (*t, r.reward)).collect();
        let summary = RewardSummary::new(per_turn, reference_turns, denominator)?;
        Ok(Self { turns, summary })
    }

    pub fn trajectory(&self) -> f64 {
        self.summary.trajectory
    }

    /// `(turn, step)` spans of this rollout in order.
    pub fn spans(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.turns
            .iter()
            .flat_map(|(t, r)| (1..=r.trace.steps() as u32).map(move |s| (*t, s)))
    }
}

/// Rewards of the `G` rollouts of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    pub checklists: BTreeMap<u32, Checklist>,
    pub rollouts: Vec<RolloutRewards>,
}

impl GroupRewards {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn trajectory(&self) -> Vec<f64> {
        self.rollouts.iter().map(RolloutRewards::trajectory).collect()
    }

    /// `(rollout, R_t)` for the rollouts that reached turn `t`.
    pub fn per_turn(&self, t: u32) -> Vec<(usize, f64)> {
        self.rollouts
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.turns.get(&t).map(|tr| (i, tr.reward)))
            .collect()
    }

    /// Per rollout, whether item `c` earned its flip reward in turn `t`;
    /// rollouts that never reached `t` count as false.
    pub fn step_satisfied(&self, t: u32, c: &str) -> Vec<bool> {
        self.rollouts
            .iter()
            .map(|r| r.turns.get(&t).is_some_and(|tr| tr.grid.earned(c)))
            .collect()
    }
}

/// Flagged conditions under which an advantage is degenerate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "kebab-case")]
pub enum AdvantageFlag {
    /// Fewer than two rollouts reached the turn; its advantages are zero.
    TurnCoverageTooSmall { turn: u32 },
    /// Standard-deviation normalization over an all-equal indicator list,
    /// so the denominator is epsilon alone.
    DegenerateIndicators { turn: u32, item: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub granularity: Granularity,
    /// `(rollout, turn, step)` → advantage.
    pub values: BTreeMap<(usize, u32, u32), f64>,
    pub flags: Vec<AdvantageFlag>,
}

impl AdvantageTable {
    fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            values: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    pub fn get(&self, rollout: usize, turn: u32, step: u32) -> Option<f64> {
        self.values.get(&(rollout, turn, step)).copied()
    }

    /// Largest elementwise difference to `other`; infinite when the span
    /// sets differ.
    pub fn max_abs_diff(&self, other: &AdvantageTable) -> f64 {
        if self.values.len() != other.values.len() {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .map(|(k, v)| other.values.get(k).map_or(f64::INFINITY, |o| (v - o).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes `group,rollout,turn,step,granularity,advantage` rows.
    pub fn write_csv<W: Write>(&self, group_id: &str, out: W, header: bool) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["group", "rollout", "turn", "step", "granularity", "advantage"])?;
        }
        for ((i, t, s), a) in &self.values {
            w.write_record([
                group_id.to_owned(),
                i.to_string(),
                t.to_string(),
                s.to_string(),
                self.granularity.name().to_owned(),
                format!("{a:e}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn require_group(group: &GroupRewards) -> Result<(), AdvantageError> {
    if group.group_size() < 2 {
        return Err(AdvantageError::GroupTooSmall(group.group_size()));
    }
    Ok(())
}

pub fn trajectory_advantage(
    group: &GroupRewards,
    spec: NormalizerSpec,
) -> Result<AdvantageTable, AdvantageError> {
    require_group(group)?;
    let rewards = group.trajectory();
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let denom = normalize(&rewards, spec);
    let mut table = AdvantageTable::new(Granularity::Trajectory);
    for (i, r) in group.rollouts.iter().enumerate() {
        let a = (rewards[i] - mean) / denom;
        for (t, s) in r.spans() {
            table.values.insert((i, t, s), a);
        }
    }
    Ok(table)
}

fn all_turns(group: &GroupRewards) -> Vec<u32> {
    let mut turns: Vec<u32> = group
        .rollouts
        .iter()
        .flat_map(|r| r.turns.keys().copied())
        .collect();
    turns.sort_unstable();
    turns.dedup();
    turns
}

pub fn turn_advantage(
    group: &GroupRewards,
    spec: NormalizerSpec,
) -> Result<AdvantageTable, AdvantageError> {
    require_group(group)?;
    let mut table = AdvantageTable::new(Granularity::Turn);
    for t in all_turns(group) {
        let reached = group.per_turn(t);
        let rewards: Vec<f64> = reached.iter().map(|(_, r)| *r).collect();
        let covered = reached.len() >= 2;
        if !covered {
            table.flags.push(AdvantageFlag::TurnCoverageTooSmall { turn: t });
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let denom = normalize(&rewards, spec);
        for (i, r) in reached {
            let a = if covered { (r - mean) / denom } else { 0.0 };
            let steps = group.rollouts[i].turns[&t].trace.steps() as u32;
            for s in 1..=steps {
                table.values.insert((i, t, s), a);
            }
        }
    }
    Ok(table)
}

/// Fraction of the group's rollouts in which `c` earned its flip reward
/// in turn `t`.
pub fn step_baseline(group: &GroupRewards, t: u32, c: &str) -> f64 {
    let hits = group.step_satisfied(t, c);
    hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

pub fn step_advantage(
    group: &GroupRewards,
    spec: NormalizerSpec,
) -> Result<AdvantageTable, AdvantageError> {
    require_group(group)?;
    let mut table = AdvantageTable::new(Granularity::Step);
    for t in all_turns(group) {
        let cl = group
            .checklists
            .get(&t)
            .ok_or(AdvantageError::MissingChecklist(t))?;
        // per item: baseline and denominator over the group's indicator list
        let stats: Vec<(f64, f64)> = cl
            .items
            .iter()
            .map(|item| {
                let ind: Vec<f64> = group
                    .step_satisfied(t, &item.id)
                    .into_iter()
                    .map(|h| if h { 1.0 } else { 0.0 })
                    .collect();
                let b = ind.iter().sum::<f64>() / ind.len() as f64;
                if spec.kind == NormalizerKind::StdDev && (b == 0.0 || b == 1.0) {
                    table.flags.push(AdvantageFlag::DegenerateIndicators {
                        turn: t,
                        item: item.id.clone(),
                    });
                }
                (b, normalize(&ind, spec))
            })
            .collect();
        for (i, r) in group.rollouts.iter().enumerate() {
            let Some(tr) = r.turns.get(&t) else { continue };
            for s in 1..=tr.trace.steps() {
                let eligible = eligible_items(&tr.trace, cl, s);
                let mut num = 0.0;
                let mut den = 0.0;
                for c in eligible {
                    let item = &cl.items[c];
                    let r_tilde = if tr.grid.backfill(s, &item.id) { 1.0 } else { 0.0 };
                    let (b, f) = stats[c];
                    num += item.weight * (r_tilde - b) / f;
                    den += item.weight;
                }
                let a = if den > 0.0 { num / den } else { 0.0 };
                table.values.insert((i, t, s as u32), a);
            }
        }
    }
    Ok(table)
}

pub fn advantages(
    group: &GroupRewards,
    granularity: Granularity,
    spec: NormalizerSpec,
) -> Result<AdvantageTable, AdvantageError> {
    match granularity {
        Granularity::Trajectory => trajectory_advantage(group, spec),
        Granularity::Turn => turn_advantage(group, spec),
        Granularity::Step => step_advantage(group, spec),
    }
}

//! Flip rewards, backfilled rewards and their turn and trajectory
//! aggregates.
//!
//! States are indexed by judged state: index 0 is the pre-turn state, in
//! which every item is unsatisfied, and index `k` is the state after the
//! `k`-th agent action. Step `s` (1-based) moves from state `s - 1` to
//! state `s`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checklist::Checklist;
use crate::judge::JudgeVerdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("verdict labels for turn {turn} step {step} do not match the checklist items")]
    InconsistentChecklist { turn: u32, step: u32 },
    #[error("verdict for turn {found} given to a turn-{expected} trace")]
    TurnMismatch { expected: u32, found: u32 },
    #[error("trajectory reward needs at least one turn in the denominator")]
    ZeroTurns,
}

/// Latched per-item satisfaction over the judged states of one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatisfactionTrace {
    #[serde(rename = "turn")]
    pub turn_index: u32,
    pub item_states: BTreeMap<String, Vec<bool>>,
}

impl SatisfactionTrace {
    /// Trace of a turn in which no action was judged.
    pub fn empty(checklist: &Checklist) -> Self {
        Self {
            turn_index: checklist.turn_index,
            item_states: checklist.ids().map(|id| (id.to_owned(), vec![false])).collect(),
        }
    }

    /// Number of judged steps.
    pub fn steps(&self) -> usize {
        self.item_states.values().next().map_or(0, |v| v.len() - 1)
    }

    /// Latched state of `item` at state index `k`; unknown items are false.
    pub fn state(&self, item: &str, k: usize) -> bool {
        self.item_states
            .get(item)
            .and_then(|v| v.get(k))
            .copied()
            .unwrap_or(false)
    }

    /// States as rows indexed by checklist position.
    fn rows(&self, checklist: &Checklist) -> Vec<Vec<bool>> {
        let n = self.steps() + 1;
        checklist
            .ids()
            .map(|id| {
                self.item_states
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| vec![false; n])
            })
            .collect()
    }
}

pub fn latch_trace(
    checklist: &Checklist,
    verdicts: &[JudgeVerdict],
) -> Result<SatisfactionTrace, RewardError> {
    let mut state = TurnRewardState::new(checklist);
    for v in verdicts {
        state.push(v)?;
    }
    Ok(state.trace())
}

/// Flip and backfilled rewards of one turn; each map holds, per item, one
/// flag per step (position `s - 1` for step `s`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardGrid {
    #[serde(rename = "turn")]
    pub turn_index: u32,
    pub flip: BTreeMap<String, Vec<bool>>,
    pub backfill: BTreeMap<String, Vec<bool>>,
}

impl RewardGrid {
    pub fn steps(&self) -> usize {
        self.flip.values().next().map_or(0, Vec::len)
    }

    pub fn flip(&self, step: usize, item: &str) -> bool {
        step >= 1 && self.flip.get(item).and_then(|v| v.get(step - 1)).copied() == Some(true)
    }

    pub fn backfill(&self, step: usize, item: &str) -> bool {
        step >= 1
            && self.backfill.get(item).and_then(|v| v.get(step - 1)).copied() == Some(true)
    }

    /// The step at which `item` earned its flip reward, if any.
    pub fn flip_step(&self, item: &str) -> Option<usize> {
        self.flip.get(item)?.iter().position(|f| *f).map(|i| i + 1)
    }

    pub fn earned(&self, item: &str) -> bool {
        self.flip_step(item).is_some()
    }
}

fn deps_hold(rows: &[Vec<bool>], deps: &[usize], k: usize) -> bool {
    deps.iter().all(|&d| rows[d][k])
}

pub fn flip_rewards(trace: &SatisfactionTrace, checklist: &Checklist) -> BTreeMap<String, Vec<bool>> {
    let rows = trace.rows(checklist);
    let deps = checklist.dependency_positions();
    let steps = trace.steps();
    checklist
        .ids()
        .enumerate()
        .map(|(c, id)| {
            let flags = (1..=steps)
                .map(|s| deps_hold(&rows, &deps[c], s - 1) && !rows[c][s - 1] && rows[c][s])
                .collect();
            (id.to_owned(), flags)
        })
        .collect()
}

pub fn backfill_rewards(
    trace: &SatisfactionTrace,
    checklist: &Checklist,
) -> BTreeMap<String, Vec<bool>> {
    let rows = trace.rows(checklist);
    let deps = checklist.dependency_positions();
    let steps = trace.steps();
    checklist
        .ids()
        .enumerate()
        .map(|(c, id)| {
            let flags = (1..=steps)
                .map(|s| {
                    deps_hold(&rows, &deps[c], s - 1)
                        && !rows[c][s - 1]
                        && (s..=steps).any(|u| rows[c][u])
                })
                .collect();
            (id.to_owned(), flags)
        })
        .collect()
}

pub fn reward_grid(trace: &SatisfactionTrace, checklist: &Checklist) -> RewardGrid {
    RewardGrid {
        turn_index: trace.turn_index,
        flip: flip_rewards(trace, checklist),
        backfill: backfill_rewards(trace, checklist),
    }
}

/// Items unsatisfied in state `s - 1` whose dependencies all hold there,
/// as checklist positions.
pub fn eligible_items(trace: &SatisfactionTrace, checklist: &Checklist, step: usize) -> Vec<usize> {
    let rows = trace.rows(checklist);
    let deps = checklist.dependency_positions();
    (0..rows.len())
        .filter(|&c| !rows[c][step - 1] && deps_hold(&rows, &deps[c], step - 1))
        .collect()
}

/// Weighted count of flip rewards in one turn.
pub fn turn_reward(grid: &RewardGrid, checklist: &Checklist) -> f64 {
    checklist
        .items
        .iter()
        .filter(|i| grid.earned(&i.id))
        .map(|i| i.weight)
        .sum()
}

/// Which turn count divides the summed turn rewards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TurnDenominator {
    /// Turns in the reference dialogue; unreached turns count as zero.
    #[default]
    Reference,
    /// Turns the rollout actually started.
    Realized,
}

pub fn trajectory_reward(per_turn: &BTreeMap<u32, f64>, l_den: usize) -> Result<f64, RewardError> {
    if l_den == 0 {
        return Err(RewardError::ZeroTurns);
    }
    Ok(per_turn.values().sum::<f64>() / l_den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub per_turn: BTreeMap<u32, f64>,
    pub trajectory: f64,
    pub denominator_turns: usize,
}

impl RewardSummary {
    /// Aggregates per-turn rewards of a rollout that started
    /// `per_turn.len()` turns of a `reference_turns`-turn dialogue.
    pub fn new(
        per_turn: BTreeMap<u32, f64>,
        reference_turns: usize,
        denominator: TurnDenominator,
    ) -> Result<Self, RewardError> {
        let denominator_turns = match denominator {
            TurnDenominator::Reference => reference_turns,
            TurnDenominator::Realized => per_turn.len(),
        };
        let trajectory = trajectory_reward(&per_turn, denominator_turns)?;
        Ok(Self {
            per_turn,
            trajectory,
            denominator_turns,
        })
    }
}

/// Verdict-by-verdict reward bookkeeping for one turn.
#[derive(Debug, Clone)]
pub struct TurnRewardState {
    turn_index: u32,
    ids: Vec<String>,
    weights: Vec<f64>,
    deps: Vec<Vec<usize>>,
    rows: Vec<Vec<bool>>,
    first_eligible: Vec<Option<usize>>,
    flip_at: Vec<Option<usize>>,
}

impl TurnRewardState {
    pub fn new(checklist: &Checklist) -> Self {
        let n = checklist.items.len();
        Self {
            turn_index: checklist.turn_index,
            ids: checklist.ids().map(str::to_owned).collect(),
            weights: checklist.items.iter().map(|i| i.weight).collect(),
            deps: checklist.dependency_positions(),
            rows: vec![vec![false]; n],
            first_eligible: vec![None; n],
            flip_at: vec![None; n],
        }
    }

    pub fn steps(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len() - 1)
    }

    /// Latches one verdict and returns the ids of items that earned their
    /// flip reward on this step.
    pub fn push(&mut self, verdict: &JudgeVerdict) -> Result<Vec<String>, RewardError> {
        if verdict.turn_index != self.turn_index {
            return Err(RewardError::TurnMismatch {
                expected: self.turn_index,
                found: verdict.turn_index,
            });
        }
        let consistent = verdict.labels.len() == self.ids.len()
            && self.ids.iter().all(|id| verdict.labels.contains_key(id));
        if !consistent {
            return Err(RewardError::InconsistentChecklist {
                turn: verdict.turn_index,
                step: verdict.step_index,
            });
        }
        let prev = self.steps();
        let s = prev + 1;
        let mut flipped = Vec::new();
        for c in 0..self.ids.len() {
            let before = self.rows[c][prev];
            let eligible = !before && deps_hold(&self.rows, &self.deps[c], prev);
            if eligible && self.first_eligible[c].is_none() {
                self.first_eligible[c] = Some(s);
            }
            let after = before || verdict.labels[&self.ids[c]];
            if eligible && after {
                self.flip_at[c] = Some(s);
                flipped.push(self.ids[c].clone());
            }
            // deferred so that dependency checks above read state s - 1
            self.rows[c].push(after);
        }
        Ok(flipped)
    }

    pub fn satisfied(&self, item: &str) -> bool {
        self.ids
            .iter()
            .position(|id| id == item)
            .is_some_and(|c| *self.rows[c].last().unwrap())
    }

    pub fn earned(&self, item: &str) -> bool {
        self.ids
            .iter()
            .position(|id| id == item)
            .is_some_and(|c| self.flip_at[c].is_some())
    }

    /// Weighted sum of flip rewards so far.
    pub fn reward(&self) -> f64 {
        (0..self.ids.len())
            .filter(|&c| self.flip_at[c].is_some())
            .map(|c| self.weights[c])
            .sum()
    }

    pub fn trace(&self) -> SatisfactionTrace {
        SatisfactionTrace {
            turn_index: self.turn_index,
            item_states: self.ids.iter().cloned().zip(self.rows.iter().cloned()).collect(),
        }
    }

    pub fn grid(&self) -> RewardGrid {
        let steps = self.steps();
        let mut flip = BTreeMap::new();
        let mut backfill = BTreeMap::new();
        for (c, id) in self.ids.iter().enumerate() {
            let mut f = vec![false; steps];
            let mut b = vec![false; steps];
            if let Some(at) = self.flip_at[c] {
                f[at - 1] = true;
                let from = self.first_eligible[c].unwrap_or(at);
                b[from - 1..at].iter_mut().for_each(|x| *x = true);
            }
            flip.insert(id.clone(), f);
            backfill.insert(id.clone(), b);
        }
        RewardGrid {
            turn_index: self.turn_index,
            flip,
            backfill,
        }
    }
}

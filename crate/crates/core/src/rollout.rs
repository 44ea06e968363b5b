//! The policy/environment loop.
//!
//! A rollout replays the reference user queries of an annotated dialogue,
//! lets the policy act until it replies, executes tool calls through the
//! hybrid simulator, judges every agent action and gates each turn
//! transition on the strict checklist items.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{AdvantageError, GroupRewards, RolloutRewards};
use crate::checklist::AnnotatedDialogue;
use crate::judge::{judge, JudgeError, JudgeSpec, JudgeVerdict};
use crate::reward::{
    latch_trace, reward_grid, RewardError, RewardGrid, RewardSummary, SatisfactionTrace,
    TurnDenominator, TurnRewardState,
};
use crate::toolsim::{execute, ReplayStore, SimulatorSpec, Source};
use crate::trajectory::{Dialogue, HistoryPrefix, PrefixOptions, Step, Turn};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("policy error: {0}")]
pub struct PolicyError(pub String);

/// Maps the observable history to the next agent action.
///
/// `act` receives the rollout's random stream; deterministic policies
/// ignore it.
pub trait Policy: Sync {
    fn act(&self, prefix: &HistoryPrefix, rng: &mut ChaCha8Rng) -> Result<Step, PolicyError>;
}

impl<F> Policy for F
where
    F: Fn(&HistoryPrefix, &mut ChaCha8Rng) -> Result<Step, PolicyError> + Sync,
{
    fn act(&self, prefix: &HistoryPrefix, rng: &mut ChaCha8Rng) -> Result<Step, PolicyError> {
        self(prefix, rng)
    }
}

/// Replays the agent actions of the reference dialogue.
pub struct ReferencePolicy<'a> {
    pub reference: &'a Dialogue,
}

impl Policy for ReferencePolicy<'_> {
    fn act(&self, prefix: &HistoryPrefix, _: &mut ChaCha8Rng) -> Result<Step, PolicyError> {
        let t = prefix.current_turn();
        let k = prefix.actions_in_turn();
        self.reference
            .turn(t)
            .and_then(|turn| turn.agent_actions().nth(k))
            .cloned()
            .ok_or_else(|| PolicyError(format!("reference turn {t} has no action {}", k + 1)))
    }
}

/// Answers every query with the same reply and never calls tools.
pub struct ReplyOnlyPolicy {
    pub reply: String,
}

impl Policy for ReplyOnlyPolicy {
    fn act(&self, _: &HistoryPrefix, _: &mut ChaCha8Rng) -> Result<Step, PolicyError> {
        Ok(Step::reply(None, self.reply.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutBudget {
    pub max_turns: usize,
    pub max_steps_per_turn: usize,
    pub max_total_steps: usize,
}

impl Default for RolloutBudget {
    fn default() -> Self {
        Self {
            max_turns: 30,
            max_steps_per_turn: 16,
            max_total_steps: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    MaxTurns,
    MaxStepsPerTurn,
    MaxTotalSteps,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    StrictnessGateFailed { turn: u32 },
    BudgetExceeded { budget: BudgetKind },
    PolicyError { message: String },
    EnvironmentError { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub budget: RolloutBudget,
    /// Extra attempts after a retryable judge failure.
    pub judge_retries: u32,
    pub denominator: TurnDenominator,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            budget: RolloutBudget::default(),
            judge_retries: 2,
            denominator: TurnDenominator::Reference,
        }
    }
}

/// Everything a rollout interacts with besides the policy.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub annotated: &'a AnnotatedDialogue,
    pub judge: &'a JudgeSpec,
    pub store: &'a ReplayStore,
    pub sim: &'a SimulatorSpec,
}

/// Origin of one tool response; `step` is the message position within
/// the turn (the user query is 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTag {
    pub turn: u32,
    pub step: u32,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub group_id: String,
    pub rollout_index: usize,
    pub seed: u64,
    pub dialogue: Dialogue,
    pub verdicts: Vec<JudgeVerdict>,
    pub grids: Vec<RewardGrid>,
    pub summary: RewardSummary,
    pub termination: Termination,
    pub sources: Vec<SourceTag>,
    pub judge_failures: u32,
}

impl RolloutRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// Agent actions taken across all turns.
    pub fn agent_steps(&self) -> usize {
        self.dialogue.turns.iter().map(|t| t.agent_actions().count()).sum()
    }

    /// Latched traces per started turn, rebuilt from the stored verdicts.
    pub fn traces(&self, annotated: &AnnotatedDialogue) -> Result<Vec<SatisfactionTrace>, RewardError> {
        self.dialogue
            .turns
            .iter()
            .map(|turn| {
                let cl = annotated
                    .checklist(turn.index)
                    .expect("rollout turns come from the annotated dialogue");
                let verdicts: Vec<JudgeVerdict> = self
                    .verdicts
                    .iter()
                    .filter(|v| v.turn_index == turn.index)
                    .cloned()
                    .collect();
                latch_trace(cl, &verdicts)
            })
            .collect()
    }

    /// Grids and summary recomputed from the stored verdicts.
    pub fn recompute(
        &self,
        annotated: &AnnotatedDialogue,
        denominator: TurnDenominator,
    ) -> Result<(Vec<RewardGrid>, RewardSummary), AdvantageError> {
        let rewards = self.rewards(annotated, denominator)?;
        let grids = rewards.turns.values().map(|t| t.grid.clone()).collect();
        Ok((grids, rewards.summary))
    }

    pub fn rewards(
        &self,
        annotated: &AnnotatedDialogue,
        denominator: TurnDenominator,
    ) -> Result<RolloutRewards, AdvantageError> {
        RolloutRewards::from_traces(
            &annotated.checklists,
            self.traces(annotated)?,
            annotated.reference_turns() as usize,
            denominator,
        )
    }
}

/// Agent-action verdict with retries; after the last failed attempt the
/// previous labels (or all-false) are carried forward.
fn judge_with_retries(
    spec: &JudgeSpec,
    prefix: &HistoryPrefix,
    annotated: &AnnotatedDialogue,
    retries: u32,
    previous: Option<&JudgeVerdict>,
    failures: &mut u32,
) -> Result<JudgeVerdict, JudgeError> {
    let t = prefix.current_turn();
    let cl = annotated.checklist(t).expect("turn has a checklist");
    for _ in 0..=retries {
        match judge(spec, prefix, cl) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() => {
                log::warn!("judge failed on {} turn {t}: {e}", prefix.dialogue_id);
            }
            Err(e) => return Err(e),
        }
    }
    *failures += 1;
    let labels = match previous {
        Some(v) => v.labels.clone(),
        None => cl.ids().map(|id| (id.to_owned(), false)).collect(),
    };
    Ok(JudgeVerdict {
        turn_index: t,
        step_index: prefix.actions_in_turn() as u32,
        labels,
    })
}

fn prefix_of(d: &Dialogue) -> HistoryPrefix {
    let last = d.turns.last().expect("a turn is open");
    d.history_prefix(last.index, last.steps.len() as u32, PrefixOptions::default())
        .expect("prefix of the open turn")
}

pub fn run_rollout(
    env: Environment<'_>,
    policy: &dyn Policy,
    options: &RolloutOptions,
    group_id: &str,
    rollout_index: usize,
    seed: u64,
) -> RolloutRecord {
    let reference = &env.annotated.dialogue;
    let judge_spec = env.judge.reseeded(seed);
    let budget = options.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut realized = Dialogue {
        id: reference.id.clone(),
        tools: reference.tools.clone(),
        turns: Vec::new(),
        system_prompt: reference.system_prompt.clone(),
    };
    let mut verdicts: Vec<JudgeVerdict> = Vec::new();
    let mut grids = Vec::new();
    let mut per_turn = BTreeMap::new();
    let mut sources = Vec::new();
    let mut judge_failures = 0;
    let mut total_steps = 0;
    let mut termination = Termination::Completed;

    'turns: for ref_turn in &reference.turns {
        let t = ref_turn.index;
        let checklist = env.annotated.checklist(t).expect("annotated turn");
        if realized.turns.len() == budget.max_turns {
            termination = Termination::BudgetExceeded {
                budget: BudgetKind::MaxTurns,
            };
            break;
        }
        if total_steps == budget.max_total_steps {
            termination = Termination::BudgetExceeded {
                budget: BudgetKind::MaxTotalSteps,
            };
            break;
        }
        let query = ref_turn.user_query().unwrap_or_default();
        realized.turns.push(Turn {
            index: t,
            steps: vec![Step::user(query)],
            incomplete: true,
        });
        let mut state = TurnRewardState::new(checklist);
        let mut replied = false;
        let mut stop = None;
        while !replied {
            if state.steps() == budget.max_steps_per_turn {
                stop = Some(Termination::BudgetExceeded {
                    budget: BudgetKind::MaxStepsPerTurn,
                });
                break;
            }
            if total_steps == budget.max_total_steps {
                stop = Some(Termination::BudgetExceeded {
                    budget: BudgetKind::MaxTotalSteps,
                });
                break;
            }
            let action = match policy.act(&prefix_of(&realized), &mut rng) {
                Ok(a @ Step::AgentAction { .. }) => a,
                Ok(other) => {
                    stop = Some(Termination::PolicyError {
                        message: format!("policy produced a {:?} step", other.kind()),
                    });
                    break;
                }
                Err(e) => {
                    stop = Some(Termination::PolicyError { message: e.0 });
                    break;
                }
            };
            replied = action.is_final_reply();
            let calls = action.tool_calls().to_vec();
            let turn = realized.turns.last_mut().unwrap();
            turn.steps.push(action);
            total_steps += 1;
            for (k, call) in calls.iter().enumerate() {
                let prefix = prefix_of(&realized);
                match execute(env.store, env.sim, call, &prefix) {
                    Ok(exec) => {
                        let turn = realized.turns.last_mut().unwrap();
                        turn.steps.push(Step::tool_response(exec.response, Some(k)));
                        sources.push(SourceTag {
                            turn: t,
                            step: turn.steps.len() as u32,
                            source: exec.source,
                        });
                    }
                    Err(e) => {
                        stop = Some(Termination::EnvironmentError {
                            message: e.to_string(),
                        });
                        break;
                    }
                }
            }
            if stop.is_some() {
                break;
            }
            let verdict = match judge_with_retries(
                &judge_spec,
                &prefix_of(&realized),
                env.annotated,
                options.judge_retries,
                verdicts.last().filter(|v| v.turn_index == t),
                &mut judge_failures,
            ) {
                Ok(v) => v,
                Err(e) => {
                    stop = Some(Termination::EnvironmentError {
                        message: e.to_string(),
                    });
                    break;
                }
            };
            state
                .push(&verdict)
                .expect("judge labels cover the checklist");
            verdicts.push(verdict);
        }
        realized.turns.last_mut().unwrap().incomplete = !replied;
        grids.push(reward_grid(&state.trace(), checklist));
        per_turn.insert(t, state.reward());
        if let Some(s) = stop {
            termination = s;
            break 'turns;
        }
        if checklist.strict_items().any(|i| !state.earned(&i.id)) {
            termination = Termination::StrictnessGateFailed { turn: t };
            break;
        }
    }

    let summary = RewardSummary::new(
        per_turn,
        env.annotated.reference_turns() as usize,
        options.denominator,
    )
    .expect("annotated dialogues have at least one turn");
    RolloutRecord {
        group_id: group_id.to_owned(),
        rollout_index,
        seed,
        dialogue: realized,
        verdicts,
        grids,
        summary,
        termination,
        sources,
        judge_failures,
    }
}

/// `group_size` independent rollouts with seeds `base_seed + i`, run in
/// parallel.
pub fn run_group(
    env: Environment<'_>,
    policy: &dyn Policy,
    options: &RolloutOptions,
    group_id: &str,
    group_size: usize,
    base_seed: u64,
) -> Result<(GroupRewards, Vec<RolloutRecord>), AdvantageError> {
    if group_size < 2 {
        return Err(AdvantageError::GroupTooSmall(group_size));
    }
    let records: Vec<RolloutRecord> = (0..group_size)
        .into_par_iter()
        .map(|i| run_rollout(env, policy, options, group_id, i, base_seed.wrapping_add(i as u64)))
        .collect();
    let group = group_rewards(env.annotated, &records, options.denominator)?;
    Ok((group, records))
}

pub fn group_rewards(
    annotated: &AnnotatedDialogue,
    records: &[RolloutRecord],
    denominator: TurnDenominator,
) -> Result<GroupRewards, AdvantageError> {
    let rollouts = records
        .iter()
        .map(|r| r.rewards(annotated, denominator))
        .collect::<Result<_, _>>()?;
    Ok(GroupRewards {
        checklists: annotated.checklists.clone(),
        rollouts,
    })
}

//! Corpus preparation: rule-based filtering, statistics, split sampling,
//! and pass-throughs to external filter and reasoning-compression models.

pub mod corpus;
mod rules;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use rules::{
    filter_dialogue, FilterConfig, FilterReport, FilterRule, FilterViolation, ReasoningMode,
    UnknownArguments, Verdict,
};

use crate::endpoint::{Client, EndpointError};
use crate::trajectory::{Dialogue, Step};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{pool} pool has {available} dialogues, {needed} needed")]
    InsufficientData {
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("compressed reasoning at turn {turn}, step {step} is not shorter ({before} -> {after} chars)")]
    NotShorter {
        turn: u32,
        step: u32,
        before: usize,
        after: usize,
    },
}

/// Filters every line; reports come back in input order.
pub fn filter_corpus(lines: &[&str], config: &FilterConfig) -> Vec<FilterReport> {
    lines.par_iter().map(|l| filter_dialogue(l, config)).collect()
}

/// Shape of one dialogue, read leniently from its raw line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    /// Messages of each turn, the opening user message included.
    pub steps_per_turn: Vec<usize>,
    pub tool_calls: usize,
    pub distinct_tools: usize,
}

impl Profile {
    /// `None` when the line has no id or no message list.
    pub fn of(line: &str) -> Option<Profile> {
        let doc: Value = serde_json::from_str(line).ok()?;
        let id = doc.get("id")?.as_str()?.to_owned();
        let messages = doc.get("messages")?.as_array()?;
        let mut steps_per_turn = Vec::new();
        let mut tool_calls = 0;
        let mut tools = BTreeSet::new();
        for m in messages {
            match m.get("role").and_then(Value::as_str) {
                Some("user") => steps_per_turn.push(1),
                Some("system") => {}
                _ => {
                    if let Some(n) = steps_per_turn.last_mut() {
                        *n += 1;
                    }
                }
            }
            for call in m.get("tool_calls").and_then(Value::as_array).into_iter().flatten() {
                tool_calls += 1;
                if let Some(name) = call.get("name").and_then(Value::as_str) {
                    tools.insert(name);
                }
            }
        }
        Some(Profile {
            id,
            steps_per_turn,
            tool_calls,
            distinct_tools: tools.len(),
        })
    }

    pub fn turns(&self) -> usize {
        self.steps_per_turn.len()
    }

    pub fn is_single_turn(&self) -> bool {
        self.turns() < 2
    }

    pub fn is_single_tool(&self) -> bool {
        self.distinct_tools < 2
    }

    /// Multi-turn and multi-tool: the default RL-pool predicate.
    pub fn is_complex(&self) -> bool {
        !self.is_single_turn() && !self.is_single_tool()
    }
}

/// Aggregate statistics of a corpus. [`CorpusStats::merge`] is
/// associative, so partial results may be combined in any grouping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub passed: usize,
    pub rejected: usize,
    /// Rejected dialogues per rule; a dialogue counts once per rule.
    pub rejections_per_rule: BTreeMap<FilterRule, usize>,
    /// Lines whose shape could not be read at all.
    pub unreadable: usize,
    pub turns_histogram: BTreeMap<usize, usize>,
    pub steps_per_turn_histogram: BTreeMap<usize, usize>,
    pub tool_calls: usize,
    pub single_turn_count: usize,
    pub single_tool_count: usize,
    /// Single-turn or single-tool: excluded from the RL pool.
    pub simple_count: usize,
}

impl CorpusStats {
    pub fn of_line(line: &str, config: &FilterConfig) -> Self {
        let report = filter_dialogue(line, config);
        let mut s = CorpusStats {
            dialogues: 1,
            ..Default::default()
        };
        match report.verdict {
            Verdict::Pass => s.passed = 1,
            Verdict::Reject => s.rejected = 1,
        }
        for rule in report.rules() {
            s.rejections_per_rule.insert(rule, 1);
        }
        match Profile::of(line) {
            None => s.unreadable = 1,
            Some(p) => {
                s.turns_histogram.insert(p.turns(), 1);
                for n in &p.steps_per_turn {
                    *s.steps_per_turn_histogram.entry(*n).or_default() += 1;
                }
                s.tool_calls = p.tool_calls;
                s.single_turn_count = usize::from(p.is_single_turn());
                s.single_tool_count = usize::from(p.is_single_tool());
                s.simple_count = usize::from(!p.is_complex());
            }
        }
        s
    }

    pub fn merge(mut self, other: Self) -> Self {
        fn add<K: Ord>(a: &mut BTreeMap<K, usize>, b: BTreeMap<K, usize>) {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
        }
        self.dialogues += other.dialogues;
        self.passed += other.passed;
        self.rejected += other.rejected;
        add(&mut self.rejections_per_rule, other.rejections_per_rule);
        self.unreadable += other.unreadable;
        add(&mut self.turns_histogram, other.turns_histogram);
        add(&mut self.steps_per_turn_histogram, other.steps_per_turn_histogram);
        self.tool_calls += other.tool_calls;
        self.single_turn_count += other.single_turn_count;
        self.single_tool_count += other.single_tool_count;
        self.simple_count += other.simple_count;
        self
    }
}

pub fn corpus_stats(lines: &[&str], config: &FilterConfig) -> CorpusStats {
    lines
        .par_iter()
        .map(|l| CorpusStats::of_line(l, config))
        .reduce(CorpusStats::default, CorpusStats::merge)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub cold_start: usize,
    pub rl: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub cold_start: Vec<String>,
    pub rl: Vec<String>,
    pub validation: Vec<String>,
}

/// Samples three disjoint id lists. The RL and validation lists come from
/// the dialogues passing `complex`; the cold-start list is drawn from
/// everything left over. Repeated ids count once, and the input order
/// does not matter.
pub fn sample_split<F>(
    profiles: &[Profile],
    sizes: SplitSizes,
    complex: F,
    seed: u64,
) -> Result<Splits, DataError>
where
    F: Fn(&Profile) -> bool,
{
    let mut unique: BTreeMap<&str, &Profile> = BTreeMap::new();
    for p in profiles {
        unique.entry(p.id.as_str()).or_insert(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&str> = unique.iter().filter(|(_, p)| complex(p)).map(|(id, _)| *id).collect();
    let needed = sizes.rl + sizes.validation;
    if pool.len() < needed {
        return Err(DataError::InsufficientData {
            pool: "rl",
            needed,
            available: pool.len(),
        });
    }
    pool.shuffle(&mut rng);
    pool.truncate(needed);
    let taken: BTreeSet<&str> = pool.iter().copied().collect();
    let mut rest: Vec<&str> = unique.keys().copied().filter(|id| !taken.contains(id)).collect();
    if rest.len() < sizes.cold_start {
        return Err(DataError::InsufficientData {
            pool: "cold_start",
            needed: sizes.cold_start,
            available: rest.len(),
        });
    }
    rest.shuffle(&mut rng);
    let owned = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Ok(Splits {
        cold_start: owned(&rest[..sizes.cold_start]),
        rl: owned(&pool[..sizes.rl]),
        validation: owned(&pool[sizes.rl..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effort {
    Low,
    Medium,
    High,
}

/// Efforts of successive external filter calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffortLadder(pub Vec<Effort>);

impl Default for EffortLadder {
    fn default() -> Self {
        use Effort::*;
        EffortLadder(vec![Low, Low, Medium, Medium, High, High])
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFilterRequest {
    pub dialogue: Value,
    pub effort: Effort,
    /// 1-based position on the ladder.
    pub attempt: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFilterReply {
    pub flagged: bool,
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub kept: bool,
    pub evaluations: usize,
    /// Ladder position and effort of the flagging call.
    pub flagged_at: Option<(usize, Effort)>,
    pub reason: Option<String>,
}

/// Walks the ladder and discards the dialogue at the first flag; only a
/// dialogue that clears every rung is kept.
pub fn model_filter(client: &Client, ladder: &EffortLadder, line: &str) -> Result<ModelVerdict, DataError> {
    let dialogue: Value =
        serde_json::from_str(line).map_err(|e| DataError::MalformedDocument(e.to_string()))?;
    for (k, &effort) in ladder.0.iter().enumerate() {
        let request = ModelFilterRequest {
            dialogue: dialogue.clone(),
            effort,
            attempt: k + 1,
        };
        let reply: ModelFilterReply = client.call(&request)?;
        if reply.flagged {
            return Ok(ModelVerdict {
                kept: false,
                evaluations: k + 1,
                flagged_at: Some((k + 1, effort)),
                reason: reply.reason,
            });
        }
    }
    Ok(ModelVerdict {
        kept: true,
        evaluations: ladder.0.len(),
        flagged_at: None,
        reason: None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompressRequest {
    pub reasoning: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompressReply {
    pub reasoning: String,
}

/// Replaces every reasoning block by the endpoint's rewrite, which must be
/// strictly shorter in characters.
pub fn compress_reasoning(client: &Client, dialogue: &Dialogue) -> Result<Dialogue, DataError> {
    let mut out = dialogue.clone();
    for turn in &mut out.turns {
        for (pos, step) in turn.steps.iter_mut().enumerate() {
            let Step::AgentAction {
                reasoning: Some(reasoning),
                ..
            } = step
            else {
                continue;
            };
            if reasoning.is_empty() {
                continue;
            }
            let reply: CompressReply = client.call(&CompressRequest {
                reasoning: reasoning.clone(),
            })?;
            let (before, after) = (reasoning.chars().count(), reply.reasoning.chars().count());
            if after >= before {
                return Err(DataError::NotShorter {
                    turn: turn.index,
                    step: pos as u32 + 1,
                    before,
                    after,
                });
            }
            *reasoning = reply.reasoning;
        }
    }
    Ok(out)
}

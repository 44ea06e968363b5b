//! Per-item boolean satisfaction labels for a trajectory prefix.
//!
//! Three judge kinds share one entry point, [`judge`]: a scripted predicate
//! engine, a Bernoulli label-flip wrapper and a client for an external
//! judging service. A majority-vote combinator is available as a hook.

mod predicate;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use predicate::{parse_predicate, Predicate};

use crate::checklist::{Checklist, Focus};
use crate::endpoint::{Client, EndpointError};
use crate::trajectory::HistoryPrefix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("prefix is in turn {prefix_turn} but checklist is for turn {checklist_turn}")]
    TurnMismatch { prefix_turn: u32, checklist_turn: u32 },
    #[error("unknown predicate kind `{0}`")]
    UnknownPredicateKind(String),
    #[error("item `{0}` has no predicate")]
    UnboundItemId(String),
    #[error("malformed predicate: {0}")]
    MalformedPredicate(String),
    #[error("predicates reference each other cyclically")]
    CyclicReference,
    #[error("flip probability {0} outside [0, 1]")]
    InvalidFlipProbability(f64),
    #[error("majority vote needs at least one member")]
    EmptyMajority,
    #[error("judge endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("judge endpoint returned a malformed reply: {0}")]
    EndpointMalformedReply(String),
}

impl JudgeError {
    /// Endpoint faults may succeed on retry; everything else is a
    /// configuration error.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            JudgeError::EndpointUnavailable(_) | JudgeError::EndpointMalformedReply(_)
        )
    }
}

impl From<EndpointError> for JudgeError {
    fn from(e: EndpointError) -> Self {
        match e {
            EndpointError::Unavailable(m) => JudgeError::EndpointUnavailable(m),
            EndpointError::Malformed(m) => JudgeError::EndpointMalformedReply(m),
        }
    }
}

/// Labels for one judged state. `step_index` counts agent actions within
/// the turn (1-based); the state judged is the one after that action and
/// its tool responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    #[serde(rename = "turn")]
    pub turn_index: u32,
    #[serde(rename = "step")]
    pub step_index: u32,
    pub labels: BTreeMap<String, bool>,
}

/// Predicates for every item of one dialogue, keyed by turn then item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedJudge {
    pub dialogue_id: String,
    pub turns: BTreeMap<u32, BTreeMap<String, Predicate>>,
}

impl ScriptedJudge {
    pub fn label(&self, prefix: &HistoryPrefix, item_id: &str) -> Result<bool, JudgeError> {
        let scope = self
            .turns
            .get(&prefix.current_turn())
            .ok_or_else(|| JudgeError::UnboundItemId(item_id.to_owned()))?;
        scope
            .get(item_id)
            .ok_or_else(|| JudgeError::UnboundItemId(item_id.to_owned()))?
            .eval(prefix.current_turn_steps(), scope, 0)
    }
}

/// One line of the predicate document format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateDocument {
    pub dialogue_id: String,
    /// turn number (as text) → item id → predicate expression
    pub turns: BTreeMap<String, BTreeMap<String, String>>,
}

pub fn parse_predicate_documents(text: &str) -> Result<Vec<PredicateDocument>, JudgeError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| JudgeError::MalformedPredicate(e.to_string())))
        .collect()
}

/// Compiles a predicate document into a scripted judge, checking that
/// every referenced item id is bound within its turn and that references
/// are acyclic.
pub fn scripted_predicates(script: &PredicateDocument) -> Result<ScriptedJudge, JudgeError> {
    let mut turns = BTreeMap::new();
    for (turn, items) in &script.turns {
        let t: u32 = turn
            .parse()
            .map_err(|_| JudgeError::MalformedPredicate(format!("turn key `{turn}`")))?;
        let mut scope = BTreeMap::new();
        for (id, expr) in items {
            scope.insert(id.clone(), parse_predicate(expr)?);
        }
        check_references(&scope)?;
        turns.insert(t, scope);
    }
    Ok(ScriptedJudge {
        dialogue_id: script.dialogue_id.clone(),
        turns,
    })
}

fn check_references(scope: &BTreeMap<String, Predicate>) -> Result<(), JudgeError> {
    fn walk<'a>(
        id: &'a str,
        scope: &'a BTreeMap<String, Predicate>,
        active: &mut BTreeSet<&'a str>,
        done: &mut BTreeSet<&'a str>,
    ) -> Result<(), JudgeError> {
        if done.contains(id) {
            return Ok(());
        }
        if !active.insert(id) {
            return Err(JudgeError::CyclicReference);
        }
        let p = scope
            .get(id)
            .ok_or_else(|| JudgeError::UnboundItemId(id.to_owned()))?;
        for r in p.references() {
            walk(r, scope, active, done)?;
        }
        active.remove(id);
        done.insert(id);
        Ok(())
    }
    let mut done = BTreeSet::new();
    for id in scope.keys() {
        walk(id, scope, &mut BTreeSet::new(), &mut done)?;
    }
    Ok(())
}

/// Client for a judging service.
#[derive(Debug, Clone)]
pub struct ExternalJudge {
    pub client: Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub id: String,
    pub question: String,
    pub pass: String,
    pub fail: String,
    pub focus: Focus,
}

/// Wire request of the external judge; the reply is a JSON object mapping
/// every item id to a boolean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub dialogue_id: String,
    pub turn: u32,
    pub step: u32,
    pub prefix: Vec<Value>,
    pub items: Vec<JudgeItem>,
}

impl JudgeRequest {
    pub fn new(prefix: &HistoryPrefix, checklist: &Checklist) -> Self {
        Self {
            dialogue_id: prefix.dialogue_id.clone(),
            turn: prefix.current_turn(),
            step: prefix.actions_in_turn() as u32,
            prefix: prefix.to_messages(),
            items: checklist
                .items
                .iter()
                .map(|i| JudgeItem {
                    id: i.id.clone(),
                    question: i.question.clone(),
                    pass: i.pass_criteria.clone(),
                    fail: i.fail_criteria.clone(),
                    focus: i.focus,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum JudgeSpec {
    Scripted(Arc<ScriptedJudge>),
    /// Flips each inner label independently with probability
    /// `flip_probability`, from a stream keyed by (seed, dialogue, turn,
    /// step, item).
    Noisy {
        flip_probability: f64,
        seed: u64,
        inner: Box<JudgeSpec>,
    },
    External(ExternalJudge),
    /// Per-label majority over member judges; ties resolve to false.
    Majority(Vec<JudgeSpec>),
}

impl JudgeSpec {
    pub fn scripted(judge: ScriptedJudge) -> Self {
        JudgeSpec::Scripted(Arc::new(judge))
    }

    pub fn noisy(inner: JudgeSpec, flip_probability: f64, seed: u64) -> Result<Self, JudgeError> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(JudgeError::InvalidFlipProbability(flip_probability));
        }
        Ok(JudgeSpec::Noisy {
            flip_probability,
            seed,
            inner: Box::new(inner),
        })
    }

    pub fn majority(members: Vec<JudgeSpec>) -> Result<Self, JudgeError> {
        if members.is_empty() {
            return Err(JudgeError::EmptyMajority);
        }
        Ok(JudgeSpec::Majority(members))
    }

    /// Same judge with every noise stream salted, so that different
    /// rollouts of one group see independent noise.
    pub fn reseeded(&self, salt: u64) -> Self {
        match self {
            JudgeSpec::Noisy {
                flip_probability,
                seed,
                inner,
            } => JudgeSpec::Noisy {
                flip_probability: *flip_probability,
                seed: mix(*seed, salt),
                inner: Box::new(inner.reseeded(salt)),
            },
            JudgeSpec::Majority(members) => {
                JudgeSpec::Majority(members.iter().map(|m| m.reseeded(salt)).collect())
            }
            other => other.clone(),
        }
    }

    /// Total label-flip probability of the outermost noise layer, if any.
    pub fn flip_probability(&self) -> Option<f64> {
        match self {
            JudgeSpec::Noisy {
                flip_probability, ..
            } => Some(*flip_probability),
            _ => None,
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{salt}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform draw in [0, 1) determined by the label's coordinates.
fn noise_draw(seed: u64, dialogue: &str, turn: u32, step: u32, item: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((dialogue.len() as u64).to_le_bytes());
    h.update(dialogue.as_bytes());
    h.update(turn.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(item.as_bytes());
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().unwrap());
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn judge(
    spec: &JudgeSpec,
    prefix: &HistoryPrefix,
    checklist: &Checklist,
) -> Result<JudgeVerdict, JudgeError> {
    if prefix.current_turn() != checklist.turn_index {
        return Err(JudgeError::TurnMismatch {
            prefix_turn: prefix.current_turn(),
            checklist_turn: checklist.turn_index,
        });
    }
    let turn_index = checklist.turn_index;
    let step_index = prefix.actions_in_turn() as u32;
    let labels = match spec {
        JudgeSpec::Scripted(s) => checklist
            .items
            .iter()
            .map(|i| Ok((i.id.clone(), s.label(prefix, &i.id)?)))
            .collect::<Result<_, JudgeError>>()?,
        JudgeSpec::Noisy {
            flip_probability,
            seed,
            inner,
        } => {
            let mut labels = judge(inner, prefix, checklist)?.labels;
            for (id, label) in labels.iter_mut() {
                let u = noise_draw(*seed, &prefix.dialogue_id, turn_index, step_index, id);
                if u < *flip_probability {
                    *label = !*label;
                }
            }
            labels
        }
        JudgeSpec::External(ext) => {
            let reply: BTreeMap<String, bool> =
                ext.client.call(&JudgeRequest::new(prefix, checklist))?;
            let want: BTreeSet<&str> = checklist.ids().collect();
            let got: BTreeSet<&str> = reply.keys().map(String::as_str).collect();
            if want != got {
                return Err(JudgeError::EndpointMalformedReply(format!(
                    "labels {got:?} do not match items {want:?}"
                )));
            }
            reply
        }
        JudgeSpec::Majority(members) => {
            let mut votes: BTreeMap<String, usize> =
                checklist.ids().map(|id| (id.to_owned(), 0)).collect();
            for m in members {
                for (id, label) in judge(m, prefix, checklist)?.labels {
                    if label {
                        *votes.get_mut(&id).unwrap() += 1;
                    }
                }
            }
            votes
                .into_iter()
                .map(|(id, n)| (id, 2 * n > members.len()))
                .collect()
        }
    };
    Ok(JudgeVerdict {
        turn_index,
        step_index,
        labels,
    })
}

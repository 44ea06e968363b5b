//! Per-turn checklists: schema, validation, dependency ordering and
//! loading of annotation files.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Dialogue;

/// Allowed deviation of an annotated weight sum from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChecklistError {
    #[error("all item weights are zero")]
    AllZeroWeights,
    #[error("dependency cycle: {0:?}")]
    DependencyCycle(Vec<String>),
    #[error("dialogue `{dialogue}` has no checklist for turn {turn}")]
    MissingChecklist { dialogue: String, turn: u32 },
    #[error("annotation references unknown dialogue `{0}`")]
    UnknownDialogue(String),
    #[error("dialogue `{dialogue}` has no turn {turn}")]
    UnknownTurn { dialogue: String, turn: u32 },
    #[error("dialogue `{dialogue}` has two checklists for turn {turn}")]
    DuplicateChecklist { dialogue: String, turn: u32 },
    #[error("checklist for dialogue `{dialogue}` turn {turn} is invalid: {violations:?}")]
    Invalid {
        dialogue: String,
        turn: u32,
        violations: Vec<Violation>,
    },
    #[error("malformed annotation document on line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Focus {
    ToolCall,
    Reasoning,
    FinalReply,
    ToolResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub id: String,
    /// (turn, step) pointers into the reference trajectory.
    #[serde(default)]
    pub evidence: Vec<(u32, u32)>,
    pub focus: Focus,
    pub question: String,
    #[serde(rename = "pass", default)]
    pub pass_criteria: String,
    #[serde(rename = "fail", default)]
    pub fail_criteria: String,
    #[serde(default)]
    pub required_for_next_turn: bool,
    #[serde(rename = "deps", default)]
    pub dependencies: Vec<String>,
    pub weight: f64,
}

impl ChecklistItem {
    /// Item with empty criteria text, handy for fixtures.
    pub fn new(id: impl Into<String>, question: impl Into<String>, weight: f64) -> Self {
        Self {
            id: id.into(),
            evidence: Vec::new(),
            focus: Focus::ToolCall,
            question: question.into(),
            pass_criteria: String::new(),
            fail_criteria: String::new(),
            required_for_next_turn: false,
            dependencies: Vec::new(),
            weight,
        }
    }

    pub fn depends_on<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.dependencies = deps.into_iter().map(Into::into).collect();
        self
    }

    pub fn strict(mut self) -> Self {
        self.required_for_next_turn = true;
        self
    }

    pub fn with_focus(mut self, focus: Focus) -> Self {
        self.focus = focus;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checklist {
    #[serde(rename = "turn")]
    pub turn_index: u32,
    pub items: Vec<ChecklistItem>,
}

impl Checklist {
    pub fn new(turn_index: u32, items: Vec<ChecklistItem>) -> Self {
        Self { turn_index, items }
    }

    pub fn item(&self, id: &str) -> Option<&ChecklistItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    pub fn weight_sum(&self) -> f64 {
        self.items.iter().map(|i| i.weight).sum()
    }

    pub fn strict_items(&self) -> impl Iterator<Item = &ChecklistItem> {
        self.items.iter().filter(|i| i.required_for_next_turn)
    }

    /// For each item (in item order), the positions of its dependencies.
    /// Unknown dependency ids are skipped; validation reports them.
    pub fn dependency_positions(&self) -> Vec<Vec<usize>> {
        self.items
            .iter()
            .map(|item| {
                item.dependencies
                    .iter()
                    .filter_map(|d| self.position(d))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ViolationKind {
    WeightSumMismatch { sum: f64 },
    NegativeWeight { weight: f64 },
    EmptyQuestion,
    DuplicateId,
    SelfDependency,
    UnknownDependency { dependency: String },
    DependencyCycle { cycle: Vec<String> },
    UnresolvedEvidence { turn: u32, step: u32 },
}

impl ViolationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ViolationKind::WeightSumMismatch { .. } => "WeightSumMismatch",
            ViolationKind::NegativeWeight { .. } => "NegativeWeight",
            ViolationKind::EmptyQuestion => "EmptyQuestion",
            ViolationKind::DuplicateId => "DuplicateId",
            ViolationKind::SelfDependency => "SelfDependency",
            ViolationKind::UnknownDependency { .. } => "UnknownDependency",
            ViolationKind::DependencyCycle { .. } => "DependencyCycle",
            ViolationKind::UnresolvedEvidence { .. } => "UnresolvedEvidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending item, absent for checklist-wide rules.
    pub item: Option<String>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub turn: u32,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.kind.name() == rule)
    }
}

pub fn validate_checklist(c: &Checklist) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |item: Option<&str>, kind| {
        violations.push(Violation {
            item: item.map(str::to_owned),
            kind,
        })
    };
    let mut seen = BTreeSet::new();
    for item in &c.items {
        if !seen.insert(item.id.as_str()) {
            push(Some(&item.id), ViolationKind::DuplicateId);
        }
        if item.question.trim().is_empty() {
            push(Some(&item.id), ViolationKind::EmptyQuestion);
        }
        if !(item.weight >= 0.0) || !item.weight.is_finite() {
            push(Some(&item.id), ViolationKind::NegativeWeight { weight: item.weight });
        }
        for dep in &item.dependencies {
            if *dep == item.id {
                push(Some(&item.id), ViolationKind::SelfDependency);
            } else if c.item(dep).is_none() {
                push(
                    Some(&item.id),
                    ViolationKind::UnknownDependency {
                        dependency: dep.clone(),
                    },
                );
            }
        }
    }
    let sum = c.weight_sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        push(None, ViolationKind::WeightSumMismatch { sum });
    }
    if let Some(cycle) = find_cycle(c) {
        push(None, ViolationKind::DependencyCycle { cycle });
    }
    ValidationReport {
        turn: c.turn_index,
        violations,
    }
}

/// Rescales weights to sum to one.
pub fn normalize_weights(c: &Checklist) -> Result<Checklist, ChecklistError> {
    let sum = c.weight_sum();
    if !(sum > 0.0) {
        return Err(ChecklistError::AllZeroWeights);
    }
    let mut out = c.clone();
    for item in &mut out.items {
        item.weight /= sum;
    }
    Ok(out)
}

/// Topological order of item ids; ties broken by id.
pub fn dependency_order(c: &Checklist) -> Result<Vec<String>, ChecklistError> {
    if let Some(cycle) = find_cycle(c) {
        return Err(ChecklistError::DependencyCycle(cycle));
    }
    let mut indegree: BTreeMap<&str, usize> = c.ids().map(|id| (id, 0)).collect();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for item in &c.items {
        for dep in item.dependencies.iter().filter(|d| c.item(d).is_some()) {
            *indegree.get_mut(item.id.as_str()).unwrap() += 1;
            dependents.entry(dep).or_default().push(&item.id);
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, n)| **n == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut order = Vec::with_capacity(c.items.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_owned());
        for next in dependents.get(id).into_iter().flatten() {
            let n = indegree.get_mut(next).unwrap();
            *n -= 1;
            if *n == 0 {
                ready.insert(next);
            }
        }
    }
    Ok(order)
}

/// First dependency cycle found by a depth-first walk in id order.
fn find_cycle(c: &Checklist) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit<'a>(
        id: &'a str,
        c: &'a Checklist,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(id, Mark::Active);
        stack.push(id);
        let item = c.item(id)?;
        let mut deps: Vec<&str> = item
            .dependencies
            .iter()
            .map(String::as_str)
            .filter(|d| *d != id && c.item(d).is_some())
            .collect();
        deps.sort_unstable();
        for dep in deps {
            match marks.get(dep).copied().unwrap_or(Mark::New) {
                Mark::Active => {
                    let start = stack.iter().position(|s| *s == dep).unwrap();
                    return Some(stack[start..].iter().map(|s| (*s).to_owned()).collect());
                }
                Mark::New => {
                    if let Some(cycle) = visit(dep, c, marks, stack) {
                        return Some(cycle);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(id, Mark::Done);
        None
    }

    let mut ids: Vec<&str> = c.ids().collect();
    ids.sort_unstable();
    let mut marks = BTreeMap::new();
    for id in ids {
        if marks.get(id).copied().unwrap_or(Mark::New) == Mark::New {
            let mut stack = Vec::new();
            if let Some(cycle) = visit(id, c, &mut marks, &mut stack) {
                return Some(cycle);
            }
        }
    }
    None
}

/// A reference dialogue together with one checklist per turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDialogue {
    pub dialogue: Dialogue,
    pub checklists: BTreeMap<u32, Checklist>,
    /// Evidence locators that do not resolve to a step of the dialogue.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_evidence: Vec<Violation>,
}

impl AnnotatedDialogue {
    /// Builds and checks an annotated dialogue.
    pub fn new(dialogue: Dialogue, checklists: Vec<Checklist>) -> Result<Self, ChecklistError> {
        let id = dialogue.id.clone();
        let mut map = BTreeMap::new();
        for c in checklists {
            if dialogue.turn(c.turn_index).is_none() {
                return Err(ChecklistError::UnknownTurn {
                    dialogue: id,
                    turn: c.turn_index,
                });
            }
            let report = validate_checklist(&c);
            if !report.is_clean() {
                return Err(ChecklistError::Invalid {
                    dialogue: id,
                    turn: c.turn_index,
                    violations: report.violations,
                });
            }
            let turn = c.turn_index;
            if map.insert(turn, c).is_some() {
                return Err(ChecklistError::DuplicateChecklist { dialogue: id, turn });
            }
        }
        for t in 1..=dialogue.len() as u32 {
            if !map.contains_key(&t) {
                return Err(ChecklistError::MissingChecklist { dialogue: id, turn: t });
            }
        }
        let unresolved_evidence = map
            .values()
            .flat_map(|c| c.items.iter())
            .flat_map(|item| {
                item.evidence.iter().filter_map(|&(t, s)| {
                    let ok = dialogue
                        .turn(t)
                        .is_some_and(|turn| s >= 1 && s as usize <= turn.steps.len());
                    (!ok).then(|| Violation {
                        item: Some(item.id.clone()),
                        kind: ViolationKind::UnresolvedEvidence { turn: t, step: s },
                    })
                })
            })
            .collect();
        Ok(Self {
            dialogue,
            checklists: map,
            unresolved_evidence,
        })
    }

    pub fn checklist(&self, turn: u32) -> Option<&Checklist> {
        self.checklists.get(&turn)
    }

    pub fn reference_turns(&self) -> u32 {
        self.dialogue.len() as u32
    }
}

/// One line of the checklist interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistDocument {
    pub dialogue_id: String,
    pub turn: u32,
    pub items: Vec<ChecklistItem>,
}

pub fn parse_checklist_documents(text: &str) -> Result<Vec<ChecklistDocument>, ChecklistError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| ChecklistError::Malformed {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Joins dialogues with their checklist documents. Output preserves
/// dialogue order.
pub fn load_annotations(
    dialogues: impl IntoIterator<Item = Dialogue>,
    annotations: impl IntoIterator<Item = ChecklistDocument>,
) -> Result<Vec<AnnotatedDialogue>, ChecklistError> {
    let dialogues: Vec<Dialogue> = dialogues.into_iter().collect();
    let known: BTreeSet<&str> = dialogues.iter().map(|d| d.id.as_str()).collect();
    let mut by_dialogue: BTreeMap<String, Vec<Checklist>> = BTreeMap::new();
    for doc in annotations {
        if !known.contains(doc.dialogue_id.as_str()) {
            return Err(ChecklistError::UnknownDialogue(doc.dialogue_id));
        }
        by_dialogue
            .entry(doc.dialogue_id)
            .or_default()
            .push(Checklist::new(doc.turn, doc.items));
    }
    dialogues
        .into_iter()
        .map(|d| {
            let lists = by_dialogue.remove(&d.id).unwrap_or_default();
            AnnotatedDialogue::new(d, lists)
        })
        .collect()
}

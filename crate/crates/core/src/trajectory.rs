//! Multi-turn, multi-step dialogue structure and its line-delimited
//! interchange format.
//!
//! A [`Dialogue`] is a list of [`Turn`]s; each turn opens with exactly one
//! user query and is followed by agent actions and the tool responses they
//! provoke. Turn and step indices are 1-based everywhere.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("structural violation [{rule}] at {location}: {message}")]
    StructuralViolation {
        rule: Rule,
        location: Location,
        message: String,
    },
    #[error("no step at turn {turn}, step {step}")]
    OutOfRange { turn: u32, step: u32 },
}

/// Identifier of a structural rule broken by a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    TurnStartsWithUserQuery,
    SingleUserQuery,
    TurnEndsWithReply,
    EmptyAgentAction,
    ToolResponseCount,
    RespondingToRange,
    FieldOnWrongKind,
    UnknownRole,
    SystemPosition,
    DuplicateToolName,
    EmptyToolName,
    UnknownTool,
    TurnIndexContiguous,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

/// Position inside a dialogue; `None` fields mean "whole dialogue/turn".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Location {
    pub turn: Option<u32>,
    pub step: Option<u32>,
}

impl Location {
    pub fn dialogue() -> Self {
        Self::default()
    }

    pub fn turn(turn: u32) -> Self {
        Self {
            turn: Some(turn),
            step: None,
        }
    }

    pub fn step(turn: u32, step: u32) -> Self {
        Self {
            turn: Some(turn),
            step: Some(step),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.turn, self.step) {
            (Some(t), Some(s)) => write!(f, "turn {t} step {s}"),
            (Some(t), None) => write!(f, "turn {t}"),
            _ => f.write_str("dialogue"),
        }
    }
}

fn violation(rule: Rule, location: Location, message: impl Into<String>) -> TrajectoryError {
    TrajectoryError::StructuralViolation {
        rule,
        location,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub type_tag: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(rename = "name")]
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Value,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, arguments: Value) -> Self {
        Self {
            tool_name: tool_name.into(),
            arguments,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    UserQuery,
    AgentAction,
    ToolResponse,
}

/// One atomic event of a turn. Field presence follows the kind, so the
/// kind-dependent rules hold by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    UserQuery {
        content: String,
    },
    AgentAction {
        reasoning: Option<String>,
        /// Reply text for a final reply; may accompany tool calls.
        content: String,
        tool_calls: Vec<ToolCall>,
    },
    ToolResponse {
        content: String,
        responding_to: Option<usize>,
    },
}

impl Step {
    pub fn user(content: impl Into<String>) -> Self {
        Step::UserQuery {
            content: content.into(),
        }
    }

    pub fn reply(reasoning: Option<String>, content: impl Into<String>) -> Self {
        Step::AgentAction {
            reasoning,
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn calls(reasoning: Option<String>, tool_calls: Vec<ToolCall>) -> Self {
        Step::AgentAction {
            reasoning,
            content: String::new(),
            tool_calls,
        }
    }

    pub fn tool_response(content: impl Into<String>, responding_to: Option<usize>) -> Self {
        Step::ToolResponse {
            content: content.into(),
            responding_to,
        }
    }

    pub fn kind(&self) -> StepKind {
        match self {
            Step::UserQuery { .. } => StepKind::UserQuery,
            Step::AgentAction { .. } => StepKind::AgentAction,
            Step::ToolResponse { .. } => StepKind::ToolResponse,
        }
    }

    pub fn content(&self) -> &str {
        match self {
            Step::UserQuery { content }
            | Step::AgentAction { content, .. }
            | Step::ToolResponse { content, .. } => content,
        }
    }

    pub fn reasoning(&self) -> Option<&str> {
        match self {
            Step::AgentAction { reasoning, .. } => reasoning.as_deref(),
            _ => None,
        }
    }

    pub fn tool_calls(&self) -> &[ToolCall] {
        match self {
            Step::AgentAction { tool_calls, .. } => tool_calls,
            _ => &[],
        }
    }

    /// An agent action without tool calls ends its turn.
    pub fn is_final_reply(&self) -> bool {
        matches!(self, Step::AgentAction { tool_calls, .. } if tool_calls.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub index: u32,
    pub steps: Vec<Step>,
    /// Set by lenient parsing (and by truncated rollouts) when the turn does
    /// not end with a final reply.
    pub incomplete: bool,
}

impl Turn {
    pub fn user_query(&self) -> Option<&str> {
        match self.steps.first() {
            Some(Step::UserQuery { content }) => Some(content),
            _ => None,
        }
    }

    /// Agent action steps in order; their 1-based position is the judged step index.
    pub fn agent_actions(&self) -> impl Iterator<Item = &Step> {
        self.steps
            .iter()
            .filter(|s| s.kind() == StepKind::AgentAction)
    }

    pub fn ends_with_reply(&self) -> bool {
        self.steps.last().is_some_and(Step::is_final_reply)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub tools: Vec<ToolSchema>,
    pub turns: Vec<Turn>,
    pub system_prompt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Turns must end with a final reply.
    #[default]
    Strict,
    /// Turns without a final reply are kept and tagged `incomplete`.
    Lenient,
}

impl Dialogue {
    pub fn tool(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn turn(&self, index: u32) -> Option<&Turn> {
        index
            .checked_sub(1)
            .and_then(|i| self.turns.get(i as usize))
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.turns.iter().map(|t| t.steps.len()).sum()
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self, mode: ParseMode) -> Result<(), TrajectoryError> {
        let mut names = std::collections::BTreeSet::new();
        for tool in &self.tools {
            if tool.name.is_empty() {
                return Err(violation(
                    Rule::EmptyToolName,
                    Location::dialogue(),
                    "tool schema with empty name",
                ));
            }
            if !names.insert(tool.name.as_str()) {
                return Err(violation(
                    Rule::DuplicateToolName,
                    Location::dialogue(),
                    format!("tool `{}` declared twice", tool.name),
                ));
            }
        }
        for (pos, turn) in self.turns.iter().enumerate() {
            let expected = pos as u32 + 1;
            if turn.index != expected {
                return Err(violation(
                    Rule::TurnIndexContiguous,
                    Location::turn(turn.index),
                    format!("expected turn index {expected}, found {}", turn.index),
                ));
            }
            self.validate_turn(turn, mode)?;
        }
        Ok(())
    }

    fn validate_turn(&self, turn: &Turn, mode: ParseMode) -> Result<(), TrajectoryError> {
        let t = turn.index;
        match turn.steps.first() {
            Some(Step::UserQuery { .. }) => {}
            _ => {
                return Err(violation(
                    Rule::TurnStartsWithUserQuery,
                    Location::step(t, 1),
                    "turn must start with UserQuery",
                ))
            }
        }
        // Calls of the most recent tool-calling action and which of them
        // have been answered so far.
        let mut pending: Option<Vec<bool>> = None;
        for (pos, step) in turn.steps.iter().enumerate().skip(1) {
            let loc = Location::step(t, pos as u32 + 1);
            match step {
                Step::UserQuery { .. } => {
                    return Err(violation(
                        Rule::SingleUserQuery,
                        loc,
                        "more than one UserQuery in a turn",
                    ))
                }
                Step::AgentAction {
                    content,
                    tool_calls,
                    ..
                } => {
                    check_answered(&pending, loc)?;
                    if tool_calls.is_empty() && content.is_empty() {
                        return Err(violation(
                            Rule::EmptyAgentAction,
                            loc,
                            "agent action has neither tool calls nor reply content",
                        ));
                    }
                    for call in tool_calls {
                        if self.tool(&call.tool_name).is_none() {
                            return Err(violation(
                                Rule::UnknownTool,
                                loc,
                                format!("call to undeclared tool `{}`", call.tool_name),
                            ));
                        }
                    }
                    pending = if tool_calls.is_empty() {
                        None
                    } else {
                        Some(vec![false; tool_calls.len()])
                    };
                }
                Step::ToolResponse { responding_to, .. } => {
                    let Some(answered) = pending.as_mut() else {
                        return Err(violation(
                            Rule::ToolResponseCount,
                            loc,
                            "tool response without a preceding tool call",
                        ));
                    };
                    let slot = match responding_to {
                        Some(i) => *i,
                        None => answered.iter().take_while(|a| **a).count(),
                    };
                    match answered.get_mut(slot) {
                        Some(a) if !*a => *a = true,
                        Some(_) => {
                            return Err(violation(
                                Rule::RespondingToRange,
                                loc,
                                format!("tool call {slot} answered twice"),
                            ))
                        }
                        None => {
                            return Err(violation(
                                if responding_to.is_some() {
                                    Rule::RespondingToRange
                                } else {
                                    Rule::ToolResponseCount
                                },
                                loc,
                                format!("no tool call {slot} to respond to"),
                            ))
                        }
                    }
                }
            }
        }
        if !turn.ends_with_reply() && (mode == ParseMode::Strict || !turn.incomplete) {
            return Err(violation(
                Rule::TurnEndsWithReply,
                Location::step(t, turn.steps.len() as u32),
                "turn does not end with a final reply",
            ));
        }
        Ok(())
    }

    /// Observable history through step `step` of turn `turn`.
    pub fn history_prefix(
        &self,
        turn: u32,
        step: u32,
        options: PrefixOptions,
    ) -> Result<HistoryPrefix, TrajectoryError> {
        let out_of_range = TrajectoryError::OutOfRange { turn, step };
        let current = self.turn(turn).ok_or(out_of_range.clone())?;
        if step == 0 || step as usize > current.steps.len() {
            return Err(out_of_range);
        }
        let mut steps = Vec::new();
        let mut turn_offsets = Vec::with_capacity(turn as usize);
        for prior in &self.turns[..turn as usize - 1] {
            turn_offsets.push(steps.len());
            steps.extend(prior.steps.iter().map(|s| {
                if options.retain_prior_reasoning {
                    s.clone()
                } else {
                    strip_reasoning(s)
                }
            }));
        }
        turn_offsets.push(steps.len());
        steps.extend_from_slice(&current.steps[..step as usize]);
        Ok(HistoryPrefix {
            dialogue_id: self.id.clone(),
            upto: (turn, step),
            steps,
            turn_offsets,
        })
    }
}

fn check_answered(pending: &Option<Vec<bool>>, loc: Location) -> Result<(), TrajectoryError> {
    if let Some(answered) = pending {
        if answered.iter().any(|a| !a) {
            return Err(violation(
                Rule::ToolResponseCount,
                loc,
                "tool call left without a response",
            ));
        }
    }
    Ok(())
}

fn strip_reasoning(step: &Step) -> Step {
    match step {
        Step::AgentAction {
            content,
            tool_calls,
            ..
        } => Step::AgentAction {
            reasoning: None,
            content: content.clone(),
            tool_calls: tool_calls.clone(),
        },
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixOptions {
    pub retain_prior_reasoning: bool,
}

impl Default for PrefixOptions {
    fn default() -> Self {
        Self {
            retain_prior_reasoning: true,
        }
    }
}

/// Flattened history h_{t,s}: full turns `1..t` followed by steps `1..=s` of turn `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPrefix {
    pub dialogue_id: String,
    pub upto: (u32, u32),
    pub steps: Vec<Step>,
    turn_offsets: Vec<usize>,
}

impl HistoryPrefix {
    pub fn current_turn(&self) -> u32 {
        self.upto.0
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps of turn `turn` that are visible in this prefix.
    pub fn turn_steps(&self, turn: u32) -> &[Step] {
        let Some(i) = (turn as usize).checked_sub(1) else {
            return &[];
        };
        let Some(&start) = self.turn_offsets.get(i) else {
            return &[];
        };
        let end = self
            .turn_offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.steps.len());
        &self.steps[start..end]
    }

    pub fn current_turn_steps(&self) -> &[Step] {
        self.turn_steps(self.current_turn())
    }

    /// The prefix rendered as interchange-format messages.
    pub fn to_messages(&self) -> Vec<Value> {
        self.steps
            .iter()
            .map(|s| serde_json::to_value(step_message(s)).expect("message serializes"))
            .collect()
    }

    /// Number of agent actions taken so far in the current turn.
    pub fn actions_in_turn(&self) -> usize {
        self.current_turn_steps()
            .iter()
            .filter(|s| s.kind() == StepKind::AgentAction)
            .count()
    }
}

// ---------------------------------------------------------------------------
// Interchange format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireDialogue {
    id: String,
    #[serde(default)]
    tools: Vec<ToolSchema>,
    #[serde(default)]
    messages: Vec<WireMessage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireMessage {
    role: String,
    #[serde(default)]
    content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<ToolCall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_call_index: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    incomplete: bool,
}

impl WireMessage {
    fn new(role: &str, content: &str) -> Self {
        Self {
            role: role.to_owned(),
            content: content.to_owned(),
            reasoning: None,
            tool_calls: None,
            tool_call_index: None,
            incomplete: false,
        }
    }
}

fn step_message(step: &Step) -> WireMessage {
    match step {
        Step::UserQuery { content } => WireMessage::new("user", content),
        Step::AgentAction {
            reasoning,
            content,
            tool_calls,
        } => {
            let mut m = WireMessage::new("assistant", content);
            m.reasoning = reasoning.clone();
            if !tool_calls.is_empty() {
                m.tool_calls = Some(tool_calls.clone());
            }
            m
        }
        Step::ToolResponse {
            content,
            responding_to,
        } => {
            let mut m = WireMessage::new("tool", content);
            m.tool_call_index = *responding_to;
            m
        }
    }
}

impl From<&Dialogue> for WireDialogue {
    fn from(d: &Dialogue) -> Self {
        let mut messages = Vec::new();
        if let Some(sys) = &d.system_prompt {
            messages.push(WireMessage::new("system", sys));
        }
        for turn in &d.turns {
            let last = turn.steps.len().saturating_sub(1);
            for (pos, step) in turn.steps.iter().enumerate() {
                let mut msg = step_message(step);
                // The tag rides on the last message of a truncated turn.
                msg.incomplete = turn.incomplete && pos == last;
                messages.push(msg);
            }
        }
        WireDialogue {
            id: d.id.clone(),
            tools: d.tools.clone(),
            messages,
        }
    }
}

impl TryFrom<WireDialogue> for Dialogue {
    type Error = TrajectoryError;

    /// Maps role runs to turns; checks only what the message shape itself
    /// requires. [`Dialogue::validate`] checks the rest.
    fn try_from(w: WireDialogue) -> Result<Self, Self::Error> {
        let mut system_prompt = None;
        let mut turns: Vec<Turn> = Vec::new();
        for (pos, msg) in w.messages.into_iter().enumerate() {
            let turn_no = turns.len() as u32;
            let loc = Location::step(turn_no.max(1), turns.last().map_or(1, |t| t.steps.len() as u32 + 1));
            if msg.role != "assistant" && (msg.reasoning.is_some() || msg.tool_calls.is_some()) {
                return Err(violation(
                    Rule::FieldOnWrongKind,
                    loc,
                    format!("`{}` message carries reasoning or tool_calls", msg.role),
                ));
            }
            if msg.role != "tool" && msg.tool_call_index.is_some() {
                return Err(violation(
                    Rule::FieldOnWrongKind,
                    loc,
                    format!("`{}` message carries tool_call_index", msg.role),
                ));
            }
            let step = match msg.role.as_str() {
                "system" => {
                    if pos != 0 {
                        return Err(violation(
                            Rule::SystemPosition,
                            loc,
                            "system message must come first",
                        ));
                    }
                    system_prompt = Some(msg.content);
                    continue;
                }
                "user" => {
                    turns.push(Turn {
                        index: turn_no + 1,
                        steps: vec![Step::user(msg.content)],
                        incomplete: msg.incomplete,
                    });
                    continue;
                }
                "assistant" => Step::AgentAction {
                    reasoning: msg.reasoning,
                    content: msg.content,
                    tool_calls: msg.tool_calls.unwrap_or_default(),
                },
                "tool" => Step::tool_response(msg.content, msg.tool_call_index),
                other => {
                    return Err(violation(
                        Rule::UnknownRole,
                        loc,
                        format!("unknown role `{other}`"),
                    ))
                }
            };
            match turns.last_mut() {
                Some(turn) => {
                    turn.steps.push(step);
                    turn.incomplete |= msg.incomplete;
                }
                None => {
                    return Err(violation(
                        Rule::TurnStartsWithUserQuery,
                        Location::step(1, 1),
                        "turn must start with UserQuery",
                    ))
                }
            }
        }
        Ok(Dialogue {
            id: w.id,
            tools: w.tools,
            turns,
            system_prompt,
        })
    }
}

impl Serialize for Dialogue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireDialogue::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Dialogue {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireDialogue::deserialize(deserializer)?;
        Dialogue::try_from(wire).map_err(serde::de::Error::custom)
    }
}

/// Parses one line of the trajectory interchange format.
pub fn parse_dialogue(document: &str, mode: ParseMode) -> Result<Dialogue, TrajectoryError> {
    let wire: WireDialogue = serde_json::from_str(document)
        .map_err(|e| TrajectoryError::MalformedDocument(e.to_string()))?;
    let mut dialogue = Dialogue::try_from(wire)?;
    if mode == ParseMode::Lenient {
        for turn in &mut dialogue.turns {
            if !turn.ends_with_reply() {
                turn.incomplete = true;
            }
        }
    }
    dialogue.validate(mode)?;
    Ok(dialogue)
}

/// Renders a dialogue as one line of the interchange format.
pub fn serialize_dialogue(d: &Dialogue) -> String {
    serde_json::to_string(&WireDialogue::from(d)).expect("dialogue serializes")
}

/// Parses every non-blank line of a line-delimited file.
pub fn parse_dialogues(text: &str, mode: ParseMode) -> Result<Vec<Dialogue>, (usize, TrajectoryError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_dialogue(l, mode).map_err(|e| (n + 1, e)))
        .collect()
}

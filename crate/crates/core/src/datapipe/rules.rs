//! The seven structural filter rules, applied to one raw interchange line.
//!
//! Rules run on the raw document rather than on a parsed [`Dialogue`] so
//! that every violation is reported, not only the first one the parser
//! trips over.
//!
//! [`Dialogue`]: crate::trajectory::Dialogue

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Identifier of a filter rule, serialized as its number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum FilterRule {
    /// Call arguments break the tool's schema.
    ToolSchema = 1,
    RoleOrder = 2,
    /// Tool calls and tool responses do not pair up.
    CallResponse = 3,
    /// Tool output embedded in an assistant message.
    ResponseInAssistant = 4,
    Syntax = 5,
    DuplicateTool = 6,
    /// Missing or redundant reasoning blocks.
    Thinking = 7,
}

impl FilterRule {
    pub const ALL: [FilterRule; 7] = [
        FilterRule::ToolSchema,
        FilterRule::RoleOrder,
        FilterRule::CallResponse,
        FilterRule::ResponseInAssistant,
        FilterRule::Syntax,
        FilterRule::DuplicateTool,
        FilterRule::Thinking,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }
}

impl From<FilterRule> for u8 {
    fn from(r: FilterRule) -> u8 {
        r.id()
    }
}

impl TryFrom<u8> for FilterRule {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        FilterRule::ALL
            .into_iter()
            .find(|r| r.id() == n)
            .ok_or_else(|| format!("no filter rule {n}; rules are numbered 1 to 7"))
    }
}

/// Whether assistant messages carry a reasoning block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningMode {
    /// Exactly one block per assistant message.
    #[default]
    Required,
    /// No blocks at all.
    Forbidden,
}

/// Treatment of call arguments that the schema does not declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownArguments {
    #[default]
    Reject,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub rules: BTreeSet<FilterRule>,
    pub reasoning: ReasoningMode,
    pub unknown_arguments: UnknownArguments,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            rules: FilterRule::ALL.into_iter().collect(),
            reasoning: ReasoningMode::default(),
            unknown_arguments: UnknownArguments::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterViolation {
    pub rule: FilterRule,
    /// `document`, `tools[i]` or `messages[i]`, positions 0-based.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Absent when the line has no readable id.
    pub dialogue_id: Option<String>,
    pub verdict: Verdict,
    pub violations: Vec<FilterViolation>,
}

impl FilterReport {
    pub fn rules(&self) -> BTreeSet<FilterRule> {
        self.violations.iter().map(|v| v.rule).collect()
    }
}

/// Markers of tool output pasted into assistant text.
const RESPONSE_MARKERS: [&str; 4] = ["<tool_response>", "</tool_response>", "<tool_result>", "</tool_result>"];
const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

struct Call {
    name: String,
    /// `None` when string-encoded arguments do not parse.
    arguments: Option<Value>,
}

/// Lenient view of one message; malformed fields are reported and
/// replaced by neutral values.
struct Message {
    role: String,
    content: String,
    reasoning: Option<String>,
    tool_calls: Vec<Call>,
    tool_call_index: Option<usize>,
}

struct Checker<'a> {
    config: &'a FilterConfig,
    violations: Vec<FilterViolation>,
}

impl Checker<'_> {
    fn flag(&mut self, rule: FilterRule, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(FilterViolation {
            rule,
            location: location.into(),
            message: message.into(),
        });
    }
}

fn at(pos: usize) -> String {
    format!("messages[{pos}]")
}

/// Applies every configured rule to one interchange line.
pub fn filter_dialogue(line: &str, config: &FilterConfig) -> FilterReport {
    let mut ck = Checker {
        config,
        violations: Vec::new(),
    };
    let dialogue_id = check_document(line, &mut ck);
    let mut violations: Vec<FilterViolation> = ck
        .violations
        .into_iter()
        .filter(|v| config.rules.contains(&v.rule))
        .collect();
    violations.sort_by_key(|v| v.rule);
    FilterReport {
        dialogue_id,
        verdict: if violations.is_empty() { Verdict::Pass } else { Verdict::Reject },
        violations,
    }
}

fn check_document(line: &str, ck: &mut Checker) -> Option<String> {
    let doc: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            ck.flag(FilterRule::Syntax, "document", format!("not a JSON document: {e}"));
            return None;
        }
    };
    let Some(obj) = doc.as_object() else {
        ck.flag(FilterRule::Syntax, "document", "document is not an object");
        return None;
    };
    let id = obj.get("id").and_then(Value::as_str).map(str::to_owned);
    if id.is_none() {
        ck.flag(FilterRule::Syntax, "document", "missing string `id`");
    }
    let tools = read_tools(obj, ck);
    let Some(messages) = read_messages(obj, ck) else {
        return id;
    };
    check_role_order(&messages, ck);
    check_call_responses(&messages, ck);
    check_embedded_responses(&messages, ck);
    check_arguments(&messages, &tools, ck);
    check_thinking(&messages, ck);
    id
}

/// Parameter map of each tool name's first schema; reports rule 5 for
/// malformed schemas and rule 6 for repeated names.
fn read_tools(obj: &Map<String, Value>, ck: &mut Checker) -> BTreeMap<String, Map<String, Value>> {
    let mut tools = BTreeMap::new();
    let list = match obj.get("tools") {
        None | Some(Value::Null) => return tools,
        Some(Value::Array(list)) => list,
        Some(_) => {
            ck.flag(FilterRule::Syntax, "document", "`tools` is not a list");
            return tools;
        }
    };
    for (i, tool) in list.iter().enumerate() {
        let loc = format!("tools[{i}]");
        let Some(name) = tool.get("name").and_then(Value::as_str) else {
            ck.flag(FilterRule::Syntax, loc, "tool schema without a string `name`");
            continue;
        };
        let params = match tool.get("parameters") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(p)) => p.clone(),
            Some(_) => {
                ck.flag(FilterRule::Syntax, loc.clone(), "`parameters` is not an object");
                Map::new()
            }
        };
        if tools.contains_key(name) {
            ck.flag(FilterRule::DuplicateTool, loc, format!("tool `{name}` is declared more than once"));
        } else {
            tools.insert(name.to_owned(), params);
        }
    }
    tools
}

fn read_messages(obj: &Map<String, Value>, ck: &mut Checker) -> Option<Vec<Message>> {
    let Some(list) = obj.get("messages").and_then(Value::as_array) else {
        ck.flag(FilterRule::Syntax, "document", "missing `messages` list");
        return None;
    };
    let mut out = Vec::with_capacity(list.len());
    for (pos, m) in list.iter().enumerate() {
        let text = |field: &str, ck: &mut Checker| match m.get(field) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                ck.flag(FilterRule::Syntax, at(pos), format!("`{field}` is not a string"));
                None
            }
        };
        let role = match m.get("role").and_then(Value::as_str) {
            Some(r) => r.to_owned(),
            None => {
                ck.flag(FilterRule::Syntax, at(pos), "message without a string `role`");
                String::new()
            }
        };
        let content = text("content", ck).unwrap_or_default();
        let reasoning = text("reasoning", ck);
        let tool_calls = match m.get("tool_calls") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(calls)) => calls
                .iter()
                .filter_map(|c| read_call(c, pos, ck))
                .collect(),
            Some(_) => {
                ck.flag(FilterRule::Syntax, at(pos), "`tool_calls` is not a list");
                Vec::new()
            }
        };
        let tool_call_index = match m.get("tool_call_index") {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(n) => Some(n as usize),
                None => {
                    ck.flag(FilterRule::Syntax, at(pos), "`tool_call_index` is not a non-negative integer");
                    None
                }
            },
        };
        out.push(Message {
            role,
            content,
            reasoning,
            tool_calls,
            tool_call_index,
        });
    }
    Some(out)
}

fn read_call(c: &Value, pos: usize, ck: &mut Checker) -> Option<Call> {
    let Some(name) = c.get("name").and_then(Value::as_str) else {
        ck.flag(FilterRule::Syntax, at(pos), "tool call without a string `name`");
        return None;
    };
    let arguments = match c.get("arguments") {
        None | Some(Value::Null) => Some(Value::Object(Map::new())),
        Some(Value::String(s)) => match serde_json::from_str(s) {
            Ok(v) => Some(v),
            Err(e) => {
                ck.flag(FilterRule::Syntax, at(pos), format!("arguments of `{name}` do not parse: {e}"));
                None
            }
        },
        Some(v) => Some(v.clone()),
    };
    Some(Call {
        name: name.to_owned(),
        arguments,
    })
}

fn check_role_order(messages: &[Message], ck: &mut Checker) {
    let mut seen_user = false;
    // Role of the last message of the current turn.
    let mut turn_tail: Option<&str> = None;
    let mut turn_start = 0;
    for (pos, m) in messages.iter().enumerate() {
        let prev = pos.checked_sub(1).map(|p| messages[p].role.as_str());
        match m.role.as_str() {
            "system" => {
                if pos != 0 {
                    ck.flag(FilterRule::RoleOrder, at(pos), "system message after the start");
                }
                continue;
            }
            "user" => {
                if let Some(tail) = turn_tail {
                    if tail != "assistant" {
                        ck.flag(FilterRule::RoleOrder, at(turn_start), "turn does not end with an assistant message");
                    }
                }
                seen_user = true;
                turn_start = pos;
            }
            "assistant" | "tool" => {
                if !seen_user {
                    ck.flag(FilterRule::RoleOrder, at(pos), format!("`{}` message before the first user message", m.role));
                }
                if m.role == "tool" && matches!(prev, Some("user") | Some("system")) {
                    ck.flag(FilterRule::RoleOrder, at(pos), "tool message directly after a user or system message");
                }
            }
            "" => {}
            other => {
                ck.flag(FilterRule::RoleOrder, at(pos), format!("unknown role `{other}`"));
            }
        }
        if seen_user {
            turn_tail = Some(m.role.as_str());
        }
    }
    if let Some(tail) = turn_tail {
        if tail != "assistant" {
            ck.flag(FilterRule::RoleOrder, at(turn_start), "turn does not end with an assistant message");
        }
    }
}

fn check_call_responses(messages: &[Message], ck: &mut Checker) {
    // Position of the calling message and which of its calls were answered.
    let mut pending: Option<(usize, Vec<bool>)> = None;
    let close = |pending: &mut Option<(usize, Vec<bool>)>, ck: &mut Checker| {
        if let Some((pos, answered)) = pending.take() {
            let missing = answered.iter().filter(|a| !**a).count();
            if missing > 0 {
                ck.flag(
                    FilterRule::CallResponse,
                    at(pos),
                    format!("{missing} of {} tool calls never answered", answered.len()),
                );
            }
        }
    };
    for (pos, m) in messages.iter().enumerate() {
        match m.role.as_str() {
            "tool" => {
                let Some((_, answered)) = pending.as_mut() else {
                    ck.flag(FilterRule::CallResponse, at(pos), "tool response without a pending tool call");
                    continue;
                };
                let index = m
                    .tool_call_index
                    .or_else(|| answered.iter().position(|a| !a))
                    .unwrap_or(answered.len());
                if index >= answered.len() {
                    ck.flag(
                        FilterRule::CallResponse,
                        at(pos),
                        format!("response to call {index} of a {}-call action", answered.len()),
                    );
                } else if answered[index] {
                    ck.flag(FilterRule::CallResponse, at(pos), format!("call {index} answered twice"));
                } else {
                    answered[index] = true;
                }
            }
            "assistant" => {
                close(&mut pending, ck);
                if !m.tool_calls.is_empty() {
                    pending = Some((pos, vec![false; m.tool_calls.len()]));
                }
            }
            _ => close(&mut pending, ck),
        }
    }
    close(&mut pending, ck);
}

fn check_embedded_responses(messages: &[Message], ck: &mut Checker) {
    for (pos, m) in messages.iter().enumerate() {
        if m.role != "assistant" {
            continue;
        }
        if m.tool_call_index.is_some() {
            ck.flag(FilterRule::ResponseInAssistant, at(pos), "assistant message carries `tool_call_index`");
        }
        let texts = [Some(m.content.as_str()), m.reasoning.as_deref()];
        if let Some(marker) = texts
            .into_iter()
            .flatten()
            .find_map(|t| RESPONSE_MARKERS.into_iter().find(|mk| t.contains(mk)))
        {
            ck.flag(FilterRule::ResponseInAssistant, at(pos), format!("assistant text contains `{marker}`"));
        }
    }
}

fn type_matches(tag: &str, v: &Value) -> bool {
    match tag {
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        "null" => v.is_null(),
        // Tags outside the JSON type names are not checkable.
        _ => true,
    }
}

fn check_arguments(messages: &[Message], tools: &BTreeMap<String, Map<String, Value>>, ck: &mut Checker) {
    for (pos, m) in messages.iter().enumerate() {
        for call in &m.tool_calls {
            let Some(params) = tools.get(&call.name) else {
                ck.flag(FilterRule::ToolSchema, at(pos), format!("call to undeclared tool `{}`", call.name));
                continue;
            };
            let Some(args) = &call.arguments else { continue };
            let Some(args) = args.as_object() else {
                ck.flag(FilterRule::ToolSchema, at(pos), format!("arguments of `{}` are not an object", call.name));
                continue;
            };
            for (name, spec) in params {
                let required = spec.get("required").and_then(Value::as_bool).unwrap_or(false);
                if required && !args.contains_key(name) {
                    ck.flag(
                        FilterRule::ToolSchema,
                        at(pos),
                        format!("`{}` is missing required argument `{name}`", call.name),
                    );
                }
            }
            for (name, value) in args {
                match params.get(name) {
                    Some(spec) => {
                        let tag = spec.get("type").and_then(Value::as_str).unwrap_or("");
                        if !type_matches(tag, value) {
                            ck.flag(
                                FilterRule::ToolSchema,
                                at(pos),
                                format!("argument `{name}` of `{}` is not of type {tag}", call.name),
                            );
                        }
                    }
                    None if ck.config.unknown_arguments == UnknownArguments::Reject => {
                        ck.flag(
                            FilterRule::ToolSchema,
                            at(pos),
                            format!("`{}` has no parameter `{name}`", call.name),
                        );
                    }
                    None => {}
                }
            }
        }
        if m.role == "tool" {
            let body = m.content.trim_start();
            if (body.starts_with('{') || body.starts_with('['))
                && serde_json::from_str::<Value>(&m.content).is_err()
            {
                ck.flag(FilterRule::Syntax, at(pos), "tool response looks like JSON but does not parse");
            }
        }
    }
}

fn check_thinking(messages: &[Message], ck: &mut Checker) {
    for (pos, m) in messages.iter().enumerate() {
        if m.role != "assistant" {
            continue;
        }
        let opens = m.content.matches(THINK_OPEN).count();
        let closes = m.content.matches(THINK_CLOSE).count();
        if opens != closes {
            ck.flag(FilterRule::Thinking, at(pos), "unbalanced thinking tags");
            continue;
        }
        let field = m.reasoning.as_deref().is_some_and(|r| !r.trim().is_empty());
        let blocks = opens + usize::from(field);
        match ck.config.reasoning {
            ReasoningMode::Required if blocks == 0 => {
                ck.flag(FilterRule::Thinking, at(pos), "assistant message without reasoning");
            }
            ReasoningMode::Required if blocks > 1 => {
                ck.flag(FilterRule::Thinking, at(pos), format!("{blocks} reasoning blocks in one message"));
            }
            ReasoningMode::Forbidden if blocks > 0 => {
                ck.flag(FilterRule::Thinking, at(pos), "reasoning in a corpus declared reasoning-free");
            }
            _ => {}
        }
    }
}

//! Hybrid tool execution: exact-match replay of recorded tool I/O with a
//! pluggable fallback simulator for unseen calls.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::endpoint::{Client, EndpointError};
use crate::trajectory::{Dialogue, HistoryPrefix, Step, ToolCall, ToolSchema};

/// Default number of in-dialogue exemplars sent to an external simulator.
pub const DEFAULT_FEWSHOT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolSimError {
    #[error("non-finite number in arguments")]
    NonFiniteNumber,
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("no template for tool `{0}`")]
    MissingTemplate(String),
    #[error("simulator unavailable: {0}")]
    SimulatorUnavailable(#[from] EndpointError),
}

/// Canonical text form of an argument document: keys sorted, no
/// insignificant whitespace, numbers in normalized form, list order kept.
pub fn canonicalize(arguments: &Value) -> Result<String, ToolSimError> {
    let mut out = String::new();
    write_canonical(arguments, &mut out)?;
    Ok(out)
}

fn write_canonical(v: &Value, out: &mut String) -> Result<(), ToolSimError> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().ok_or(ToolSimError::NonFiniteNumber)?;
                out.push_str(&canonical_f64(f)?);
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_canonical(&map[k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// `Display` for f64 already yields the shortest round-trip digits and
/// drops the fraction of integral values; only the sign of zero differs.
fn canonical_f64(f: f64) -> Result<String, ToolSimError> {
    if !f.is_finite() {
        return Err(ToolSimError::NonFiniteNumber);
    }
    if f == 0.0 {
        return Ok("0".into());
    }
    Ok(f.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionWarning {
    pub tool_name: String,
    pub fingerprint: String,
    pub kept: String,
    pub discarded: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayStore {
    pub provenance: String,
    pub tools: Vec<ToolSchema>,
    /// (tool name, argument fingerprint) → recorded response.
    entries: BTreeMap<(String, String), String>,
    pub warnings: Vec<CollisionWarning>,
}

impl ReplayStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, call: &ToolCall) -> Option<&str> {
        let fp = canonicalize(&call.arguments).ok()?;
        self.entries
            .get(&(call.tool_name.clone(), fp))
            .map(String::as_str)
    }

    /// Records a pair; on a key collision with a different response the
    /// first one stays and a warning is kept.
    pub fn record(&mut self, call: &ToolCall, response: &str) -> Result<(), ToolSimError> {
        let key = (call.tool_name.clone(), canonicalize(&call.arguments)?);
        match self.entries.get(&key) {
            Some(kept) if kept != response => {
                log::warn!(
                    "replay collision for `{}` {}: keeping first response",
                    key.0,
                    key.1
                );
                self.warnings.push(CollisionWarning {
                    tool_name: key.0,
                    fingerprint: key.1,
                    kept: kept.clone(),
                    discarded: response.to_owned(),
                });
            }
            Some(_) => {}
            None => {
                self.entries.insert(key, response.to_owned());
            }
        }
        Ok(())
    }
}

/// Tool call paired with the response that answered it, in dialogue order.
pub fn call_response_pairs(steps: &[Step]) -> Vec<(&ToolCall, &str)> {
    let mut pairs = Vec::new();
    let mut calls: &[ToolCall] = &[];
    let mut answered = 0usize;
    for step in steps {
        match step {
            Step::AgentAction { tool_calls, .. } => {
                calls = tool_calls;
                answered = 0;
            }
            Step::ToolResponse {
                content,
                responding_to,
            } => {
                let slot = responding_to.unwrap_or(answered);
                answered += 1;
                if let Some(call) = calls.get(slot) {
                    pairs.push((call, content.as_str()));
                }
            }
            Step::UserQuery { .. } => calls = &[],
        }
    }
    pairs
}

pub fn build_replay_store(d: &Dialogue) -> ReplayStore {
    let mut store = ReplayStore {
        provenance: d.id.clone(),
        tools: d.tools.clone(),
        ..ReplayStore::default()
    };
    for turn in &d.turns {
        for (call, response) in call_response_pairs(&turn.steps) {
            if let Err(e) = store.record(call, response) {
                log::warn!("skipping unrecordable call `{}`: {e}", call.tool_name);
            }
        }
    }
    store
}

#[derive(Debug, Clone)]
pub enum SimulatorSpec {
    /// Fixed-shape document embedding the call.
    Echo,
    /// `{param}` placeholders substituted from the call arguments.
    Template {
        templates: BTreeMap<String, String>,
        default: Option<String>,
    },
    External {
        client: Client,
        fewshot_from_dialogue: bool,
        max_exemplars: usize,
    },
}

impl SimulatorSpec {
    /// Reads a template file: a JSON map of tool name → template; the key
    /// `*` declares the default template.
    pub fn from_template_file(text: &str) -> Result<Self, serde_json::Error> {
        let mut templates: BTreeMap<String, String> = serde_json::from_str(text)?;
        let default = templates.remove("*");
        Ok(SimulatorSpec::Template { templates, default })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Replayed,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub response: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub arguments: Value,
    pub response: String,
}

/// Wire request of the external simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRequest {
    pub tool: ToolSchema,
    pub name: String,
    pub arguments: Value,
    pub exemplars: Vec<Exemplar>,
    pub prefix_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResponse {
    pub response_text: String,
}

pub fn prefix_digest(prefix: &HistoryPrefix) -> String {
    let text = serde_json::to_string(&prefix.to_messages()).expect("prefix serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn execute(
    store: &ReplayStore,
    sim: &SimulatorSpec,
    call: &ToolCall,
    prefix: &HistoryPrefix,
) -> Result<Execution, ToolSimError> {
    let schema = store
        .tools
        .iter()
        .find(|t| t.name == call.tool_name)
        .ok_or_else(|| ToolSimError::UnknownTool(call.tool_name.clone()))?;
    if let Some(recorded) = store.lookup(call) {
        return Ok(Execution {
            response: recorded.to_owned(),
            source: Source::Replayed,
        });
    }
    let response = match sim {
        SimulatorSpec::Echo => canonicalize(&serde_json::json!({
            "tool": call.tool_name,
            "arguments": call.arguments,
            "simulated": true,
        }))?,
        SimulatorSpec::Template { templates, default } => {
            let template = templates
                .get(&call.tool_name)
                .or(default.as_ref())
                .ok_or_else(|| ToolSimError::MissingTemplate(call.tool_name.clone()))?;
            fill_template(template, &call.arguments)?
        }
        SimulatorSpec::External {
            client,
            fewshot_from_dialogue,
            max_exemplars,
        } => {
            let exemplars = if *fewshot_from_dialogue {
                fewshot_exemplars(prefix, &call.tool_name, *max_exemplars)
            } else {
                Vec::new()
            };
            let request = SimulationRequest {
                tool: schema.clone(),
                name: call.tool_name.clone(),
                arguments: call.arguments.clone(),
                exemplars,
                prefix_digest: prefix_digest(prefix),
            };
            client.call::<_, SimulationResponse>(&request)?.response_text
        }
    };
    Ok(Execution {
        response,
        source: Source::Simulated,
    })
}

/// The `k` most recent in-prefix I/O pairs of the same tool, oldest first.
pub fn fewshot_exemplars(prefix: &HistoryPrefix, tool: &str, k: usize) -> Vec<Exemplar> {
    let pairs: Vec<Exemplar> = call_response_pairs(&prefix.steps)
        .into_iter()
        .filter(|(c, _)| c.tool_name == tool)
        .map(|(c, r)| Exemplar {
            arguments: c.arguments.clone(),
            response: r.to_owned(),
        })
        .collect();
    let skip = pairs.len().saturating_sub(k);
    pairs.into_iter().skip(skip).collect()
}

fn fill_template(template: &str, arguments: &Value) -> Result<String, ToolSimError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match arguments.get(name) {
                    Some(Value::String(s)) => out.push_str(s),
                    Some(v) => out.push_str(&canonicalize(v)?),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{testing::Canned, Endpoint};
    use crate::trajectory::{PrefixOptions, Turn};
    use serde_json::json;

    fn tool(name: &str) -> ToolSchema {
        ToolSchema {
            name: name.into(),
            description: String::new(),
            parameters: BTreeMap::new(),
        }
    }

    fn dialogue(pairs: &[(&str, Value, &str)]) -> Dialogue {
        let mut steps = vec![Step::user("go")];
        for (name, args, resp) in pairs {
            steps.push(Step::calls(None, vec![ToolCall::new(*name, args.clone())]));
            steps.push(Step::tool_response(*resp, Some(0)));
        }
        steps.push(Step::reply(None, "done"));
        Dialogue {
            id: "d".into(),
            tools: vec![tool("temp"), tool("search")],
            system_prompt: None,
            turns: vec![Turn {
                index: 1,
                steps,
                incomplete: false,
            }],
        }
    }

    fn prefix(d: &Dialogue) -> HistoryPrefix {
        d.history_prefix(1, 1, PrefixOptions::default()).unwrap()
    }

    #[test]
    fn key_order_invariant() {
        assert_eq!(
            canonicalize(&json!({"b": 1, "a": 2})).unwrap(),
            canonicalize(&json!({"a": 2, "b": 1})).unwrap()
        );
    }

    #[test]
    fn integral_floats_match_integers() {
        let a: Value = serde_json::from_str(r#"{"x":1.0}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"x":1}"#).unwrap();
        // independent check: the parsed numbers are numerically equal
        assert_eq!(a["x"].as_f64(), b["x"].as_f64());
        assert_eq!(canonicalize(&a).unwrap(), canonicalize(&b).unwrap());
        assert_eq!(canonicalize(&json!(-0.0)).unwrap(), "0");
        assert_eq!(canonicalize(&json!(0.1)).unwrap(), "0.1");
    }

    #[test]
    fn list_order_significant() {
        assert_ne!(
            canonicalize(&json!({"x": [1, 2]})).unwrap(),
            canonicalize(&json!({"x": [2, 1]})).unwrap()
        );
    }

    #[test]
    fn replay_hit_and_reordered_hit() {
        let d = dialogue(&[("search", json!({"q": "a", "n": 2}), "R1")]);
        let store = build_replay_store(&d);
        let p = prefix(&d);
        let exact = execute(&store, &SimulatorSpec::Echo, &ToolCall::new("search", json!({"q": "a", "n": 2})), &p).unwrap();
        assert_eq!(exact, Execution { response: "R1".into(), source: Source::Replayed });
        let call: ToolCall =
            serde_json::from_str(r#"{"name":"search","arguments":{"n":2.0,"q":"a"}}"#).unwrap();
        assert_eq!(execute(&store, &SimulatorSpec::Echo, &call, &p).unwrap().source, Source::Replayed);
    }

    #[test]
    fn template_fallback() {
        let d = dialogue(&[]);
        let store = build_replay_store(&d);
        let sim = SimulatorSpec::from_template_file(r#"{"temp": "{city} is sunny"}"#).unwrap();
        let out = execute(&store, &sim, &ToolCall::new("temp", json!({"city": "Oslo"})), &prefix(&d)).unwrap();
        assert_eq!(out, Execution { response: "Oslo is sunny".into(), source: Source::Simulated });
        assert_eq!(
            execute(&store, &sim, &ToolCall::new("search", json!({})), &prefix(&d)),
            Err(ToolSimError::MissingTemplate("search".into()))
        );
        assert_eq!(
            execute(&store, &sim, &ToolCall::new("nope", json!({})), &prefix(&d)),
            Err(ToolSimError::UnknownTool("nope".into()))
        );
    }

    #[test]
    fn template_renders_non_strings_canonically() {
        assert_eq!(fill_template("{n} items, {missing}, {", &json!({"n": 3.0})).unwrap(), "3 items, {missing}, {");
    }

    #[test]
    fn store_counting_and_collisions() {
        let three = dialogue(&[
            ("search", json!({"q": "a"}), "1"),
            ("search", json!({"q": "b"}), "2"),
            ("temp", json!({"city": "x"}), "3"),
        ]);
        assert_eq!(build_replay_store(&three).len(), 3);
        let dup = dialogue(&[("search", json!({"q": "a"}), "1"), ("search", json!({"q": "a"}), "1")]);
        let s = build_replay_store(&dup);
        assert_eq!((s.len(), s.warnings.len()), (1, 0));
        let clash = dialogue(&[("search", json!({"q": "a"}), "1"), ("search", json!({"q": "a"}), "2")]);
        let s = build_replay_store(&clash);
        assert_eq!((s.len(), s.warnings.len()), (1, 1));
        assert_eq!(s.lookup(&ToolCall::new("search", json!({"q": "a"}))), Some("1"));
    }

    #[test]
    fn external_simulator_sends_recent_exemplars() {
        let d = dialogue(&[
            ("search", json!({"q": "1"}), "r1"),
            ("search", json!({"q": "2"}), "r2"),
            ("temp", json!({"city": "x"}), "t"),
            ("search", json!({"q": "3"}), "r3"),
        ]);
        let store = ReplayStore {
            tools: d.tools.clone(),
            ..ReplayStore::default()
        };
        let full = d.history_prefix(1, d.turns[0].steps.len() as u32, PrefixOptions::default()).unwrap();
        let canned = Canned::new(vec![Ok(json!({"response_text": "simulated!"}))]);
        let sim = SimulatorSpec::External {
            client: Client::new(Endpoint::new("http://unused"), canned.clone()),
            fewshot_from_dialogue: true,
            max_exemplars: 2,
        };
        let out = execute(&store, &sim, &ToolCall::new("search", json!({"q": "4"})), &full).unwrap();
        assert_eq!(out.response, "simulated!");
        let req = canned.requests.lock().unwrap()[0].clone();
        let req: SimulationRequest = serde_json::from_value(req).unwrap();
        let sent: Vec<&str> = req.exemplars.iter().map(|e| e.response.as_str()).collect();
        assert_eq!(sent, vec!["r2", "r3"]);
        assert_eq!(req.prefix_digest.len(), 64);
    }

    #[test]
    fn external_failure_surfaces() {
        let d = dialogue(&[]);
        let store = build_replay_store(&d);
        let sim = SimulatorSpec::External {
            client: Client::new(Endpoint::new("http://unused"), Canned::new(vec![])),
            fewshot_from_dialogue: false,
            max_exemplars: DEFAULT_FEWSHOT,
        };
        assert!(matches!(
            execute(&store, &sim, &ToolCall::new("temp", json!({})), &prefix(&d)),
            Err(ToolSimError::SimulatorUnavailable(_))
        ));
    }
}

//! Labeled violation corpus for the filter rules, plus random clean
//! dialogues for statistics checks.
//!
//! Each entry is one interchange line and the exact set of rules it
//! breaks; clean near-misses carry an empty set.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::FilterRule;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledLine {
    pub line: String,
    pub rules: BTreeSet<FilterRule>,
}

fn tools() -> Value {
    json!([
        {"name": "search", "description": "find flights", "parameters": {
            "query": {"type": "string", "required": true},
            "limit": {"type": "integer", "required": false}
        }},
        {"name": "book", "description": "book a flight", "parameters": {
            "flight": {"type": "string", "required": true},
            "seats": {"type": "integer", "required": true}
        }}
    ])
}

/// A clean two-turn, two-tool dialogue with one reasoning field per
/// assistant message.
pub fn valid_document(id: &str) -> Value {
    json!({
        "id": id,
        "tools": tools(),
        "messages": [
            {"role": "system", "content": "You are a travel agent."},
            {"role": "user", "content": "Find me a flight to SFO."},
            {"role": "assistant", "content": "", "reasoning": "Search first.",
             "tool_calls": [{"name": "search", "arguments": {"query": "SFO"}}]},
            {"role": "tool", "content": "{\"flights\": [\"F7\"]}", "tool_call_index": 0},
            {"role": "assistant", "content": "F7 is available.", "reasoning": "Report the result."},
            {"role": "user", "content": "Book two seats."},
            {"role": "assistant", "content": "", "reasoning": "Book F7.",
             "tool_calls": [{"name": "book", "arguments": {"flight": "F7", "seats": 2}}]},
            {"role": "tool", "content": "booked", "tool_call_index": 0},
            {"role": "assistant", "content": "Booked two seats on F7.", "reasoning": "Confirm."}
        ]
    })
}

/// A clean single-turn dialogue that calls one tool.
pub fn single_turn_document(id: &str) -> Value {
    json!({
        "id": id,
        "tools": tools(),
        "messages": [
            {"role": "user", "content": "Any flights to SFO?"},
            {"role": "assistant", "content": "", "reasoning": "Search.",
             "tool_calls": [{"name": "search", "arguments": {"query": "SFO"}}]},
            {"role": "tool", "content": "F7", "tool_call_index": 0},
            {"role": "assistant", "content": "F7 flies there.", "reasoning": "Answer."}
        ]
    })
}

fn edit(id: &str, f: impl FnOnce(&mut Value)) -> String {
    let mut doc = valid_document(id);
    f(&mut doc);
    doc.to_string()
}

fn msgs(doc: &mut Value) -> &mut Vec<Value> {
    doc["messages"].as_array_mut().expect("fixture has messages")
}

fn entry(line: String, rules: &[u8]) -> LabeledLine {
    LabeledLine {
        line,
        rules: rules
            .iter()
            .map(|&n| FilterRule::try_from(n).expect("rule number"))
            .collect(),
    }
}

/// The labeled corpus; meant for [`ReasoningMode::Required`] and rejecting
/// unknown arguments.
///
/// [`ReasoningMode::Required`]: super::ReasoningMode::Required
pub fn violation_corpus() -> Vec<LabeledLine> {
    let mut c = vec![
        entry(valid_document("clean-base").to_string(), &[]),
        entry(single_turn_document("clean-single").to_string(), &[]),
    ];

    // 1: tool schema
    c.push(entry(edit("r1-missing", |d| d["messages"][2]["tool_calls"][0]["arguments"] = json!({})), &[1]));
    c.push(entry(
        edit("r1-type", |d| d["messages"][6]["tool_calls"][0]["arguments"]["seats"] = json!("two")),
        &[1],
    ));
    c.push(entry(
        edit("r1-unknown-arg", |d| d["messages"][2]["tool_calls"][0]["arguments"]["cabin"] = json!("economy")),
        &[1],
    ));
    c.push(entry(edit("r1-unknown-tool", |d| d["messages"][6]["tool_calls"][0]["name"] = json!("cancel")), &[1]));
    c.push(entry(
        edit("r1-not-object", |d| d["messages"][2]["tool_calls"][0]["arguments"] = json!(["SFO"])),
        &[1],
    ));
    c.push(entry(
        edit("r1-near-optional", |d| d["messages"][2]["tool_calls"][0]["arguments"]["limit"] = json!(3)),
        &[],
    ));
    c.push(entry(
        edit("r1-near-float-int", |d| d["messages"][6]["tool_calls"][0]["arguments"]["seats"] = json!(2.0)),
        &[],
    ));
    c.push(entry(
        edit("r1-near-string-args", |d| {
            d["messages"][2]["tool_calls"][0]["arguments"] = json!("{\"query\": \"SFO\"}")
        }),
        &[],
    ));

    // 2: role ordering
    c.push(entry(
        edit("r2-tool-first", |d| {
            msgs(d).insert(2, json!({"role": "tool", "content": "early"}));
        }),
        &[2, 3],
    ));
    c.push(entry(
        edit("r2-double-user", |d| {
            msgs(d).insert(1, json!({"role": "user", "content": "Hello?"}));
        }),
        &[2],
    ));
    c.push(entry(
        edit("r2-late-system", |d| {
            msgs(d).insert(5, json!({"role": "system", "content": "Be brief."}));
        }),
        &[2],
    ));
    c.push(entry(
        edit("r2-unknown-role", |d| {
            msgs(d).insert(5, json!({"role": "narrator", "content": "Later."}));
        }),
        &[2],
    ));
    c.push(entry(
        edit("r2-ends-with-user", |d| {
            msgs(d).push(json!({"role": "user", "content": "Thanks!"}));
        }),
        &[2],
    ));
    c.push(entry(
        edit("r2-near-no-system", |d| {
            msgs(d).remove(0);
        }),
        &[],
    ));
    c.push(entry(
        edit("r2-near-reply-with-calls", |d| d["messages"][2]["content"] = json!("Let me check.")),
        &[],
    ));
    c.push(entry(
        edit("r2-near-second-action", |d| {
            // A second tool-calling action after a response, same turn.
            let m = msgs(d);
            m.insert(4, json!({"role": "assistant", "content": "", "reasoning": "Check again.",
                "tool_calls": [{"name": "search", "arguments": {"query": "SFO", "limit": 1}}]}));
            m.insert(5, json!({"role": "tool", "content": "F7", "tool_call_index": 0}));
        }),
        &[],
    ));

    // 3: call/response pairing
    c.push(entry(
        edit("r3-unanswered", |d| {
            d["messages"][2]["tool_calls"]
                .as_array_mut()
                .unwrap()
                .push(json!({"name": "search", "arguments": {"query": "LAX"}}));
        }),
        &[3],
    ));
    c.push(entry(edit("r3-index-range", |d| d["messages"][3]["tool_call_index"] = json!(4)), &[3]));
    c.push(entry(
        edit("r3-answered-twice", |d| {
            msgs(d).insert(4, json!({"role": "tool", "content": "again", "tool_call_index": 0}));
        }),
        &[3],
    ));
    c.push(entry(
        edit("r3-orphan-response", |d| {
            let m = msgs(d);
            m.insert(5, json!({"role": "tool", "content": "stray"}));
            m.insert(6, json!({"role": "assistant", "content": "Anything else?", "reasoning": "Follow up."}));
        }),
        &[3],
    ));
    c.push(entry(
        edit("r3-near-parallel", |d| {
            let m = msgs(d);
            m[2]["tool_calls"]
                .as_array_mut()
                .unwrap()
                .push(json!({"name": "search", "arguments": {"query": "OAK"}}));
            m.insert(3, json!({"role": "tool", "content": "O1", "tool_call_index": 1}));
        }),
        &[],
    ));
    c.push(entry(
        edit("r3-near-positional", |d| {
            d["messages"][3].as_object_mut().unwrap().remove("tool_call_index");
            d["messages"][7].as_object_mut().unwrap().remove("tool_call_index");
        }),
        &[],
    ));
    c.push(entry(
        edit("r3-near-reversed", |d| {
            let m = msgs(d);
            m[6]["tool_calls"]
                .as_array_mut()
                .unwrap()
                .push(json!({"name": "search", "arguments": {"query": "F7 seats"}}));
            m.insert(7, json!({"role": "tool", "content": "2 left", "tool_call_index": 1}));
        }),
        &[],
    ));

    // 4: tool output inside assistant messages
    c.push(entry(
        edit("r4-content", |d| {
            d["messages"][4]["content"] = json!("<tool_response>{\"flights\": [\"F7\"]}</tool_response> F7 is available.")
        }),
        &[4],
    ));
    c.push(entry(
        edit("r4-reasoning", |d| d["messages"][8]["reasoning"] = json!("<tool_result>booked</tool_result> Confirm.")),
        &[4],
    ));
    c.push(entry(edit("r4-index", |d| d["messages"][4]["tool_call_index"] = json!(0)), &[4]));
    c.push(entry(
        edit("r4-near-words", |d| d["messages"][4]["content"] = json!("The tool response lists F7.")),
        &[],
    ));
    c.push(entry(
        edit("r4-near-tool-side", |d| d["messages"][7]["content"] = json!("<tool_response>booked</tool_response>")),
        &[],
    ));
    c.push(entry(
        edit("r4-near-angle", |d| d["messages"][8]["content"] = json!("Booked <2> seats on F7.")),
        &[],
    ));

    // 5: structured-text syntax
    c.push(entry(valid_document("r5-truncated").to_string()[..120].to_owned(), &[5]));
    c.push(entry("not json at all".to_owned(), &[5]));
    c.push(entry(
        edit("r5-string-args", |d| d["messages"][2]["tool_calls"][0]["arguments"] = json!("{\"query\": SFO}")),
        &[5],
    ));
    c.push(entry(edit("r5-tool-json", |d| d["messages"][3]["content"] = json!("{\"flights\": [\"F7\"")), &[5]));
    c.push(entry(edit("r5-messages-type", |d| d["messages"] = json!("none")), &[5]));
    c.push(entry(edit("r5-near-tool-text", |d| d["messages"][3]["content"] = json!("flights: F7")), &[]));
    c.push(entry(edit("r5-near-tool-array", |d| d["messages"][3]["content"] = json!("[\"F7\", \"F9\"]")), &[]));
    c.push(entry(
        edit("r5-near-unicode", |d| d["messages"][8]["content"] = json!("Réservé: F7 ✈")),
        &[],
    ));

    // 6: duplicate tools
    c.push(entry(
        edit("r6-identical", |d| {
            let first = d["tools"][0].clone();
            d["tools"].as_array_mut().unwrap().push(first);
        }),
        &[6],
    ));
    c.push(entry(
        edit("r6-same-name", |d| {
            d["tools"].as_array_mut().unwrap().push(json!({"name": "search", "parameters": {}}));
        }),
        &[6],
    ));
    c.push(entry(
        edit("r6-book-twice", |d| {
            d["tools"]
                .as_array_mut()
                .unwrap()
                .insert(0, json!({"name": "book", "description": "old", "parameters": {
                    "flight": {"type": "string", "required": true},
                    "seats": {"type": "integer", "required": true}
                }}));
        }),
        &[6],
    ));
    c.push(entry(
        edit("r6-near-suffix", |d| {
            d["tools"].as_array_mut().unwrap().push(json!({"name": "search_v2", "parameters": {}}));
        }),
        &[],
    ));
    c.push(entry(
        edit("r6-near-case", |d| {
            d["tools"].as_array_mut().unwrap().push(json!({"name": "Search", "parameters": {}}));
        }),
        &[],
    ));
    c.push(entry(
        edit("r6-near-unused", |d| {
            d["tools"].as_array_mut().unwrap().push(json!({"name": "cancel", "parameters": {}}));
        }),
        &[],
    ));

    // 7: reasoning blocks
    c.push(entry(
        edit("r7-missing", |d| {
            d["messages"][4].as_object_mut().unwrap().remove("reasoning");
        }),
        &[7],
    ));
    c.push(entry(
        edit("r7-redundant", |d| d["messages"][8]["content"] = json!("<think>Confirm.</think>Booked two seats on F7.")),
        &[7],
    ));
    c.push(entry(
        edit("r7-two-inline", |d| {
            d["messages"][4].as_object_mut().unwrap().remove("reasoning");
            d["messages"][4]["content"] = json!("<think>a</think><think>b</think>F7 is available.");
        }),
        &[7],
    ));
    c.push(entry(
        edit("r7-unclosed", |d| {
            d["messages"][4].as_object_mut().unwrap().remove("reasoning");
            d["messages"][4]["content"] = json!("<think>Report the result. F7 is available.");
        }),
        &[7],
    ));
    c.push(entry(edit("r7-blank", |d| d["messages"][8]["reasoning"] = json!("  ")), &[7]));
    c.push(entry(
        edit("r7-near-inline", |d| {
            d["messages"][4].as_object_mut().unwrap().remove("reasoning");
            d["messages"][4]["content"] = json!("<think>Report the result.</think>F7 is available.");
        }),
        &[],
    ));
    c.push(entry(
        edit("r7-near-tool-think", |d| d["messages"][7]["content"] = json!("<think>booked")),
        &[],
    ));
    c.push(entry(
        edit("r7-near-user-think", |d| d["messages"][5]["content"] = json!("Book two seats. <think>")),
        &[],
    ));
    c
}

/// A random clean dialogue with 1 to 5 turns and 0 to 3 calls per turn.
pub fn random_clean_document<R: Rng>(id: &str, rng: &mut R) -> Value {
    let mut messages = vec![json!({"role": "system", "content": "Help the user."})];
    for t in 0..rng.gen_range(1..=5) {
        messages.push(json!({"role": "user", "content": format!("request {t}")}));
        for _ in 0..rng.gen_range(0..=3) {
            let call = if rng.gen_bool(0.5) {
                json!({"name": "search", "arguments": {"query": format!("q{}", rng.gen_range(0..100))}})
            } else {
                json!({"name": "book", "arguments": {"flight": "F7", "seats": rng.gen_range(1..5)}})
            };
            messages.push(json!({"role": "assistant", "content": "", "reasoning": "act", "tool_calls": [call]}));
            messages.push(json!({"role": "tool", "content": "ok", "tool_call_index": 0}));
        }
        messages.push(json!({"role": "assistant", "content": "done", "reasoning": "reply"}));
    }
    json!({"id": id, "tools": tools(), "messages": messages})
}

pub fn random_clean_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_clean_document(&format!("fuzz-{i}"), &mut rng).to_string())
        .collect()
}

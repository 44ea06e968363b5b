//! Small annotated dialogues shared by tests, examples and the CLI smoke
//! runs.
//!
//! `f3` is a single booking turn with three weighted items: `c1` (search,
//! 0.5), `c2` (book, 0.3, after `c1`) and the strict reply item `c3` (0.2,
//! after `c1`). `two_turn` appends a strict confirmation turn.

use std::collections::BTreeMap;

use serde_json::json;

use crate::checklist::{AnnotatedDialogue, Checklist, ChecklistItem, Focus};
use crate::judge::{scripted_predicates, JudgeSpec, PredicateDocument, ScriptedJudge};
use crate::trajectory::{Dialogue, ParamSpec, Step, ToolCall, ToolSchema, Turn};

fn tool(name: &str, param: &str) -> ToolSchema {
    ToolSchema {
        name: name.into(),
        description: format!("{name} tool"),
        parameters: [(
            param.to_owned(),
            ParamSpec {
                type_tag: "string".into(),
                required: true,
                description: String::new(),
            },
        )]
        .into_iter()
        .collect(),
    }
}

fn booking_turn() -> Turn {
    Turn {
        index: 1,
        incomplete: false,
        steps: vec![
            Step::user("Book the cheapest flight to Oslo."),
            Step::calls(
                Some("Search first.".into()),
                vec![ToolCall::new("search", json!({"query": "flights Oslo"}))],
            ),
            Step::tool_response(r#"{"flights":[{"id":"F7","price":89}]}"#, Some(0)),
            Step::calls(
                Some("F7 is cheapest.".into()),
                vec![ToolCall::new("book", json!({"flight_id": "F7"}))],
            ),
            Step::tool_response(r#"{"status":"booked","flight_id":"F7"}"#, Some(0)),
            Step::reply(None, "Your flight F7 is booked."),
        ],
    }
}

fn confirm_turn() -> Turn {
    Turn {
        index: 2,
        incomplete: false,
        steps: vec![
            Step::user("Send me the confirmation."),
            Step::calls(None, vec![ToolCall::new("email", json!({"flight_id": "F7"}))]),
            Step::tool_response(r#"{"sent":true}"#, Some(0)),
            Step::reply(None, "Confirmation sent."),
        ],
    }
}

pub fn f3_checklist() -> Checklist {
    Checklist::new(
        1,
        vec![
            ChecklistItem::new("c1", "Did the agent search for flights?", 0.5)
                .with_focus(Focus::ToolCall),
            ChecklistItem::new("c2", "Did the agent book the cheapest flight?", 0.3)
                .with_focus(Focus::ToolCall)
                .depends_on(["c1"]),
            ChecklistItem::new("c3", "Did the reply confirm the booking?", 0.2)
                .with_focus(Focus::FinalReply)
                .depends_on(["c1"])
                .strict(),
        ],
    )
}

fn confirm_checklist() -> Checklist {
    Checklist::new(
        2,
        vec![
            ChecklistItem::new("d1", "Was the confirmation emailed?", 0.5).with_focus(Focus::ToolCall),
            ChecklistItem::new("d2", "Did the reply say it was sent?", 0.5)
                .with_focus(Focus::FinalReply)
                .depends_on(["d1"])
                .strict(),
        ],
    )
}

fn tools() -> Vec<ToolSchema> {
    vec![tool("search", "query"), tool("book", "flight_id"), tool("email", "flight_id")]
}

pub fn f3_dialogue() -> Dialogue {
    Dialogue {
        id: "f3".into(),
        tools: tools(),
        system_prompt: None,
        turns: vec![booking_turn()],
    }
}

pub fn f3() -> AnnotatedDialogue {
    AnnotatedDialogue::new(f3_dialogue(), vec![f3_checklist()]).expect("fixture is valid")
}

pub fn two_turn() -> AnnotatedDialogue {
    let dialogue = Dialogue {
        id: "f3-2".into(),
        tools: tools(),
        system_prompt: None,
        turns: vec![booking_turn(), confirm_turn()],
    };
    AnnotatedDialogue::new(dialogue, vec![f3_checklist(), confirm_checklist()])
        .expect("fixture is valid")
}

/// Predicate document for `f3` (and, with turn 2, `two_turn`).
pub fn predicates(dialogue_id: &str) -> PredicateDocument {
    let turn = |items: &[(&str, &str)]| -> BTreeMap<String, String> {
        items
            .iter()
            .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
            .collect()
    };
    PredicateDocument {
        dialogue_id: dialogue_id.into(),
        turns: [
            (
                "1".to_owned(),
                turn(&[
                    ("c1", r#"tool_called(name="search")"#),
                    ("c2", r#"tool_called(name="book", args.flight_id="F7")"#),
                    ("c3", r#"reply_contains("booked")"#),
                ]),
            ),
            (
                "2".to_owned(),
                turn(&[
                    ("d1", r#"tool_called(name="email")"#),
                    ("d2", r#"reply_contains("sent")"#),
                ]),
            ),
        ]
        .into_iter()
        .collect(),
    }
}

pub fn scripted_judge(dialogue_id: &str) -> ScriptedJudge {
    scripted_predicates(&predicates(dialogue_id)).expect("fixture predicates compile")
}

pub fn clean_judge(dialogue_id: &str) -> JudgeSpec {
    JudgeSpec::scripted(scripted_judge(dialogue_id))
}

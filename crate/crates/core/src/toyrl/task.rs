//! Synthetic multi-turn tool-use tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checklist::{AnnotatedDialogue, Checklist, ChecklistItem, Focus};
use crate::judge::{scripted_predicates, PredicateDocument, ScriptedJudge};
use crate::toolsim::{build_replay_store, ReplayStore};
use crate::trajectory::{Dialogue, ParamSpec, Step, ToolCall, ToolSchema, Turn};

/// Largest argument space per slot.
pub const MAX_ARG_VALUES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub turns: usize,
    pub invocations_per_turn: usize,
    pub arg_values: usize,
    pub distractor_tools: usize,
    pub reply_tokens: usize,
    pub seed: u64,
}

impl Default for TaskParams {
    /// The standard two-turn task.
    fn default() -> Self {
        Self {
            turns: 2,
            invocations_per_turn: 2,
            arg_values: 4,
            distractor_tools: 2,
            reply_tokens: 4,
            seed: 0,
        }
    }
}

/// One discrete action of the toy agent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionTemplate {
    Call { tool: String, value: String },
    Reply { token: String },
}

impl ActionTemplate {
    pub fn to_step(&self) -> Step {
        match self {
            ActionTemplate::Call { tool, value } => {
                Step::calls(None, vec![ToolCall::new(tool.clone(), json!({ "arg": value }))])
            }
            ActionTemplate::Reply { token } => Step::reply(None, token.clone()),
        }
    }

    /// Inverse of [`to_step`](Self::to_step).
    pub fn from_step(step: &Step) -> Option<Self> {
        match step.tool_calls() {
            [] if step.is_final_reply() => Some(ActionTemplate::Reply {
                token: step.content().to_owned(),
            }),
            [call] => Some(ActionTemplate::Call {
                tool: call.tool_name.clone(),
                value: call.arguments.get("arg")?.as_str()?.to_owned(),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub params: TaskParams,
    pub annotated: AnnotatedDialogue,
    pub predicates: PredicateDocument,
    pub judge: ScriptedJudge,
    pub store: ReplayStore,
    pub templates: Vec<ActionTemplate>,
    template_index: BTreeMap<ActionTemplate, usize>,
}

impl ToyTask {
    pub fn template_of(&self, step: &Step) -> Option<usize> {
        ActionTemplate::from_step(step).and_then(|a| self.template_index.get(&a).copied())
    }
}

fn tool_name(i: usize) -> String {
    const NAMES: [&str; 8] = ["lookup", "fetch", "quote", "reserve", "notify", "cancel", "rate", "track"];
    match NAMES.get(i) {
        Some(n) => (*n).to_owned(),
        None => format!("tool_{i}"),
    }
}

/// Each turn requires its invocations in order, each depending on the
/// previous one, followed by a strict reply item that depends on the last
/// invocation. Weights are uniform within a turn.
pub fn generate_task(params: &TaskParams) -> ToyTask {
    assert!(params.arg_values >= 1 && params.arg_values <= MAX_ARG_VALUES);
    assert!(params.turns >= 1 && params.reply_tokens >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_tools = params.turns * params.invocations_per_turn + params.distractor_tools;
    let mut names: Vec<String> = (0..n_tools).map(tool_name).collect();
    names.shuffle(&mut rng);
    let values: Vec<String> = (0..params.arg_values).map(|v| format!("v{v}")).collect();
    let tokens: Vec<String> = (0..params.reply_tokens).map(|k| format!("R{k}")).collect();

    let tools: Vec<ToolSchema> = {
        let mut sorted = names.clone();
        sorted.sort();
        sorted
            .into_iter()
            .map(|name| ToolSchema {
                description: format!("{name} something"),
                parameters: [(
                    "arg".to_owned(),
                    ParamSpec {
                        type_tag: "string".into(),
                        required: true,
                        description: String::new(),
                    },
                )]
                .into_iter()
                .collect(),
                name,
            })
            .collect()
    };

    let mut turns = Vec::new();
    let mut checklists = Vec::new();
    let mut predicate_turns = BTreeMap::new();
    for t in 1..=params.turns as u32 {
        let mut steps = vec![Step::user(format!("request {t}"))];
        let mut items = Vec::new();
        let mut preds = BTreeMap::new();
        let n_items = params.invocations_per_turn + 1;
        let w = 1.0 / n_items as f64;
        let mut prev: Option<String> = None;
        for k in 0..params.invocations_per_turn {
            let tool = names[(t as usize - 1) * params.invocations_per_turn + k].clone();
            let value = values[rng.gen_range(0..values.len())].clone();
            steps.push(ActionTemplate::Call { tool: tool.clone(), value: value.clone() }.to_step());
            steps.push(Step::tool_response(format!("{tool} ok {value}"), Some(0)));
            let id = format!("t{t}_call{}", k + 1);
            let mut item = ChecklistItem::new(&id, format!("Did the agent call {tool} with {value}?"), w)
                .with_focus(Focus::ToolCall);
            if let Some(p) = &prev {
                item = item.depends_on([p.clone()]);
            }
            preds.insert(id.clone(), format!(r#"tool_called(name="{tool}", args.arg="{value}")"#));
            items.push(item);
            prev = Some(id);
        }
        let token = tokens[rng.gen_range(0..tokens.len())].clone();
        steps.push(Step::reply(None, token.clone()));
        let id = format!("t{t}_reply");
        let mut item = ChecklistItem::new(&id, format!("Did the reply say {token}?"), w)
            .with_focus(Focus::FinalReply)
            .strict();
        if let Some(p) = &prev {
            item = item.depends_on([p.clone()]);
        }
        preds.insert(id.clone(), format!(r#"reply_contains("{token}")"#));
        items.push(item);
        turns.push(Turn { index: t, steps, incomplete: false });
        checklists.push(Checklist::new(t, items));
        predicate_turns.insert(t.to_string(), preds);
    }

    let dialogue = Dialogue {
        id: format!("toy-{}", params.seed),
        tools,
        turns,
        system_prompt: None,
    };
    let store = build_replay_store(&dialogue);
    let annotated = AnnotatedDialogue::new(dialogue, checklists).expect("generated task is valid");
    let predicates = PredicateDocument {
        dialogue_id: annotated.dialogue.id.clone(),
        turns: predicate_turns,
    };
    let judge = scripted_predicates(&predicates).expect("generated predicates compile");

    let mut sorted_names = names;
    sorted_names.sort();
    let mut templates: Vec<ActionTemplate> = sorted_names
        .iter()
        .flat_map(|tool| {
            values.iter().map(move |value| ActionTemplate::Call {
                tool: tool.clone(),
                value: value.clone(),
            })
        })
        .collect();
    templates.extend(tokens.into_iter().map(|token| ActionTemplate::Reply { token }));
    let template_index = templates.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();

    ToyTask {
        params: params.clone(),
        annotated,
        predicates,
        judge,
        store,
        templates,
        template_index,
    }
}

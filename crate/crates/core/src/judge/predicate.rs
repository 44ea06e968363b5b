//! The textual predicate language of scripted judges.
//!
//! ```text
//! tool_called(name="search", args.query="cm2")
//! reply_contains("refund")
//! reasoning_contains("plan")
//! response_field("status", "ok")
//! all_of(c1, c2)   any_of(c1, c2)   not(c1)
//! ```

use std::collections::BTreeMap;

use serde_json::Value;

use super::JudgeError;
use crate::toolsim::canonicalize;
use crate::trajectory::Step;

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    ToolCalled {
        name: String,
        /// (dotted argument path, expected value)
        args: Vec<(String, Value)>,
    },
    ReplyContains(String),
    ReasoningContains(String),
    ResponseField { path: String, value: Value },
    AllOf(Vec<String>),
    AnyOf(Vec<String>),
    Not(String),
}

impl Predicate {
    /// Item ids this predicate refers to.
    pub fn references(&self) -> &[String] {
        match self {
            Predicate::AllOf(ids) | Predicate::AnyOf(ids) => ids,
            Predicate::Not(id) => std::slice::from_ref(id),
            _ => &[],
        }
    }

    /// Evaluates against the steps of one turn; `scope` resolves item
    /// references within the same turn.
    pub(crate) fn eval(
        &self,
        steps: &[Step],
        scope: &BTreeMap<String, Predicate>,
        depth: usize,
    ) -> Result<bool, JudgeError> {
        if depth > scope.len() + 1 {
            return Err(JudgeError::CyclicReference);
        }
        let lookup = |id: &String| -> Result<bool, JudgeError> {
            scope
                .get(id)
                .ok_or_else(|| JudgeError::UnboundItemId(id.clone()))?
                .eval(steps, scope, depth + 1)
        };
        Ok(match self {
            Predicate::ToolCalled { name, args } => steps
                .iter()
                .flat_map(Step::tool_calls)
                .filter(|c| c.tool_name == *name)
                .any(|c| {
                    args.iter()
                        .all(|(path, want)| lookup_path(&c.arguments, path).is_some_and(|got| same_value(got, want)))
                }),
            Predicate::ReplyContains(text) => steps
                .iter()
                .filter(|s| s.is_final_reply())
                .any(|s| s.content().contains(text.as_str())),
            Predicate::ReasoningContains(text) => steps
                .iter()
                .filter_map(Step::reasoning)
                .any(|r| r.contains(text.as_str())),
            Predicate::ResponseField { path, value } => steps
                .iter()
                .filter(|s| matches!(s, Step::ToolResponse { .. }))
                .filter_map(|s| serde_json::from_str::<Value>(s.content()).ok())
                .any(|doc| lookup_path(&doc, path).is_some_and(|got| same_value(got, value))),
            Predicate::AllOf(ids) => {
                for id in ids {
                    if !lookup(id)? {
                        return Ok(false);
                    }
                }
                true
            }
            Predicate::AnyOf(ids) => {
                for id in ids {
                    if lookup(id)? {
                        return Ok(true);
                    }
                }
                false
            }
            Predicate::Not(id) => !lookup(id)?,
        })
    }
}

fn lookup_path<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').filter(|p| !p.is_empty()).try_fold(doc, |cur, seg| match cur {
        Value::Object(m) => m.get(seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => None,
    })
}

fn same_value(a: &Value, b: &Value) -> bool {
    match (canonicalize(a), canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Literal(Value),
    Open,
    Close,
    Comma,
    Eq,
}

fn tokenize(src: &str) -> Result<Vec<Token>, JudgeError> {
    let bad = |m: String| JudgeError::MalformedPredicate(format!("{m} in `{src}`"));
    let mut tokens = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            ')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            ',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            '=' => {
                tokens.push(Token::Eq);
                i += 1;
            }
            '"' => {
                // JSON string literal, escapes included
                let start = i;
                i += 1;
                while i < chars.len() && chars[i] != '"' {
                    if chars[i] == '\\' {
                        i += 1;
                    }
                    i += 1;
                }
                if i >= chars.len() {
                    return Err(bad("unterminated string".into()));
                }
                i += 1;
                let lit: String = chars[start..i].iter().collect();
                let v: Value = serde_json::from_str(&lit).map_err(|e| bad(e.to_string()))?;
                tokens.push(Token::Literal(v));
            }
            c if c == '-' || c.is_ascii_digit() => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || matches!(chars[i], '.' | '+' | '-')) {
                    i += 1;
                }
                let lit: String = chars[start..i].iter().collect();
                let v: Value = serde_json::from_str(&lit).map_err(|_| bad(format!("bad number `{lit}`")))?;
                tokens.push(Token::Literal(v));
            }
            c if c.is_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '.' | '-')) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                tokens.push(match word.as_str() {
                    "true" => Token::Literal(Value::Bool(true)),
                    "false" => Token::Literal(Value::Bool(false)),
                    "null" => Token::Literal(Value::Null),
                    _ => Token::Ident(word),
                });
            }
            other => return Err(bad(format!("unexpected `{other}`"))),
        }
    }
    Ok(tokens)
}

/// One call argument: `key=value`, a bare literal, or a bare identifier.
#[derive(Debug)]
enum Arg {
    Keyed(String, Value),
    Literal(Value),
    Ident(String),
}

pub fn parse_predicate(src: &str) -> Result<Predicate, JudgeError> {
    let bad = |m: &str| JudgeError::MalformedPredicate(format!("{m} in `{src}`"));
    let tokens = tokenize(src)?;
    let mut it = tokens.into_iter().peekable();
    let Some(Token::Ident(kind)) = it.next() else {
        return Err(bad("expected predicate name"));
    };
    if it.next() != Some(Token::Open) {
        return Err(bad("expected `(`"));
    }
    let mut args = Vec::new();
    loop {
        match it.next() {
            Some(Token::Close) if args.is_empty() => break,
            Some(Token::Ident(word)) => {
                if it.peek() == Some(&Token::Eq) {
                    it.next();
                    match it.next() {
                        Some(Token::Literal(v)) => args.push(Arg::Keyed(word, v)),
                        Some(Token::Ident(v)) => args.push(Arg::Keyed(word, Value::String(v))),
                        _ => return Err(bad("expected value after `=`")),
                    }
                } else {
                    args.push(Arg::Ident(word));
                }
            }
            Some(Token::Literal(v)) => args.push(Arg::Literal(v)),
            _ => return Err(bad("expected argument")),
        }
        match it.next() {
            Some(Token::Comma) => continue,
            Some(Token::Close) => break,
            _ => return Err(bad("expected `,` or `)`")),
        }
    }
    if it.next().is_some() {
        return Err(bad("trailing input"));
    }

    let text_arg = |args: Vec<Arg>| -> Result<String, JudgeError> {
        match args.as_slice() {
            [Arg::Literal(Value::String(s))] => Ok(s.clone()),
            [Arg::Ident(s)] => Ok(s.clone()),
            _ => Err(bad("expected one text argument")),
        }
    };
    let id_args = |args: Vec<Arg>| -> Result<Vec<String>, JudgeError> {
        args.into_iter()
            .map(|a| match a {
                Arg::Ident(id) | Arg::Literal(Value::String(id)) => Ok(id),
                _ => Err(bad("expected item ids")),
            })
            .collect()
    };
    match kind.as_str() {
        "tool_called" => {
            let mut name = None;
            let mut pairs = Vec::new();
            for a in args {
                match a {
                    Arg::Keyed(k, Value::String(v)) if k == "name" => name = Some(v),
                    Arg::Keyed(k, v) => match k.strip_prefix("args.") {
                        Some(path) if !path.is_empty() => pairs.push((path.to_owned(), v)),
                        _ => return Err(bad("tool_called takes name= and args.<path>=")),
                    },
                    Arg::Literal(Value::String(v)) | Arg::Ident(v) if name.is_none() => name = Some(v),
                    _ => return Err(bad("tool_called takes name= and args.<path>=")),
                }
            }
            Ok(Predicate::ToolCalled {
                name: name.ok_or_else(|| bad("tool_called needs a name"))?,
                args: pairs,
            })
        }
        "reply_contains" => Ok(Predicate::ReplyContains(text_arg(args)?)),
        "reasoning_contains" => Ok(Predicate::ReasoningContains(text_arg(args)?)),
        "response_field" => match <[Arg; 2]>::try_from(args) {
            Ok([path, value]) => {
                let path = match path {
                    Arg::Literal(Value::String(p)) | Arg::Ident(p) => p,
                    _ => return Err(bad("response_field path must be text")),
                };
                let value = match value {
                    Arg::Literal(v) => v,
                    Arg::Ident(v) => Value::String(v),
                    Arg::Keyed(..) => return Err(bad("response_field value must be a literal")),
                };
                Ok(Predicate::ResponseField { path, value })
            }
            Err(_) => Err(bad("response_field takes (path, value)")),
        },
        "all_of" => Ok(Predicate::AllOf(id_args(args)?)),
        "any_of" => Ok(Predicate::AnyOf(id_args(args)?)),
        "not" => match id_args(args)?.as_slice() {
            [id] => Ok(Predicate::Not(id.clone())),
            _ => Err(bad("not takes exactly one item id")),
        },
        other => Err(JudgeError::UnknownPredicateKind(other.to_owned())),
    }
}

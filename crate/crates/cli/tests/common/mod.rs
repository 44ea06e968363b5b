//! Helpers shared by the binary-level tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use checklist_rl::checklist::ChecklistDocument;
use checklist_rl::fixtures;
use checklist_rl::trajectory::serialize_dialogue;
use serde_json::Value;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_checklist-rl"));
    cmd.env_remove("RUST_LOG");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// The sample data shipped under `data/f3`, rendered from the library
/// fixtures: file name and contents.
pub fn f3_files() -> Vec<(&'static str, String)> {
    let annotated = [fixtures::f3(), fixtures::two_turn()];
    let mut dialogues = String::new();
    let mut checklists = String::new();
    let mut predicates = String::new();
    for a in &annotated {
        dialogues.push_str(&serialize_dialogue(&a.dialogue));
        dialogues.push('\n');
        for cl in a.checklists.values() {
            let doc = ChecklistDocument {
                dialogue_id: a.dialogue.id.clone(),
                turn: cl.turn_index,
                items: cl.items.clone(),
            };
            checklists.push_str(&serde_json::to_string(&doc).unwrap());
            checklists.push('\n');
        }
        predicates.push_str(&serde_json::to_string(&fixtures::predicates(&a.dialogue.id)).unwrap());
        predicates.push('\n');
    }
    vec![
        ("dialogues.jsonl", dialogues),
        ("checklists.jsonl", checklists),
        ("predicates.jsonl", predicates),
    ]
}

/// Writes the F3 sample files into `dir` and returns their paths in the
/// order dialogues, checklists, predicates.
pub fn write_f3(dir: &Path) -> [PathBuf; 3] {
    let files = f3_files();
    let paths: Vec<PathBuf> = files
        .iter()
        .map(|(name, text)| {
            let p = dir.join(name);
            fs::write(&p, text).unwrap();
            p
        })
        .collect();
    paths.try_into().unwrap()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Artifact checksums recorded in a run manifest.
pub fn artifacts(dir: &Path) -> Value {
    read_json(&dir.join("manifest.json"))["artifacts"].clone()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

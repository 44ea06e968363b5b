//! The five commands. Each reads its inputs, writes its artifacts and a
//! manifest under `--out`, and never touches its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use checklist_rl::advantage::{advantages, Granularity};
use checklist_rl::checklist::{
    validate_checklist, AnnotatedDialogue, Checklist, ChecklistDocument, ViolationKind,
};
use checklist_rl::datapipe::{corpus_stats, filter_corpus, Verdict};
use checklist_rl::endpoint::Client;
use checklist_rl::judge::{scripted_predicates, ExternalJudge, JudgeError, JudgeSpec, PredicateDocument};
use checklist_rl::rollout::{
    run_group, run_rollout, Environment, Policy, ReferencePolicy, ReplyOnlyPolicy, RolloutOptions,
    RolloutRecord,
};
use checklist_rl::toolsim::{build_replay_store, SimulatorSpec};
use checklist_rl::toyrl::{generate_task, read_curves, train, write_curves, LearningCurve};
use checklist_rl::trajectory::{parse_dialogue, Dialogue, ParseMode, TrajectoryError};
use serde::Serialize;

use crate::config::{Config, PolicyChoice, SimulatorChoice};
use crate::manifest::{sha256_hex, write_artifact, RunManifest};
use crate::report::{evaluate, summarize, write_comparisons, write_mean_curves, write_summary};
use crate::{read_text, Cli, CliError, Command, Outcome};

/// Shared state of one invocation.
struct Run<'a> {
    cli: &'a Cli,
    config: Config,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

impl Run<'_> {
    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let text = read_text(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn out_dir(&self) -> Result<Option<&Path>, CliError> {
        let Some(dir) = self.cli.global.out.as_deref() else {
            return Ok(None);
        };
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Some(dir))
    }

    fn require_out(&self) -> Result<&Path, CliError> {
        self.out_dir()?
            .ok_or_else(|| CliError::Input(format!("`{}` needs --out", self.cli.command.name())))
    }

    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let dir = self.require_out()?.to_owned();
        let (name, sum) = write_artifact(&dir, name, bytes)?;
        self.artifacts.insert(name, sum);
        Ok(())
    }

    fn finish(self, seeds: Vec<u64>) -> Result<(), CliError> {
        let Some(dir) = self.out_dir()?.map(Path::to_owned) else {
            return Ok(());
        };
        RunManifest {
            command: self.cli.command.name().to_owned(),
            config_path: self.cli.global.config.as_ref().map(|p| p.display().to_string()),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            seeds,
            output_dir: dir.display().to_string(),
            inputs: self.inputs,
            artifacts: self.artifacts,
        }
        .write(&dir)
    }
}

pub fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    let mut config = Config::load(cli.global.config.as_deref())?;
    config.apply(&cli.global.overrides());
    let mut run = Run {
        cli,
        config,
        inputs: BTreeMap::new(),
        artifacts: BTreeMap::new(),
    };
    match &cli.command {
        Command::Validate {
            dialogues,
            checklists,
            predicates,
        } => validate(&mut run, dialogues, checklists.as_deref(), predicates.as_deref()).and_then(|o| {
            run.finish(Vec::new())?;
            Ok(o)
        }),
        Command::Filter { input } => {
            let o = filter(&mut run, input)?;
            run.finish(Vec::new())?;
            Ok(o)
        }
        Command::Rollout {
            dialogues,
            checklists,
            predicates,
        } => {
            let o = rollout(&mut run, dialogues, checklists, predicates.as_deref())?;
            let seed = run.config.rollout.seed;
            run.finish(vec![seed])?;
            Ok(o)
        }
        Command::Train => {
            let o = train_cmd(&mut run)?;
            let seeds = run.config.train.seeds.clone();
            run.finish(seeds)?;
            Ok(o)
        }
        Command::Report { curves } => {
            let o = report(&mut run, curves)?;
            run.finish(Vec::new())?;
            Ok(o)
        }
    }
}

fn to_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        out.extend(serde_json::to_vec(item).expect("item serializes"));
        out.push(b'\n');
    }
    out
}

/// Non-empty lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationEntry {
    /// `file:line`.
    pub source: String,
    pub dialogue: Option<String>,
    pub turn: Option<u32>,
    pub item: Option<String>,
    pub rule: String,
    pub message: String,
}

fn variant_name<T: std::fmt::Debug>(v: &T) -> String {
    let text = format!("{v:?}");
    text.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_owned()
}

fn validate(
    run: &mut Run,
    dialogues_path: &Path,
    checklists_path: Option<&Path>,
    predicates_path: Option<&Path>,
) -> Result<Outcome, CliError> {
    let mut entries: Vec<ValidationEntry> = Vec::new();
    let mut entry = |source: String, dialogue: Option<&str>, turn, item: Option<&str>, rule: String, message: String| {
        entries.push(ValidationEntry {
            source,
            dialogue: dialogue.map(str::to_owned),
            turn,
            item: item.map(str::to_owned),
            rule,
            message,
        })
    };

    let text = run.read(dialogues_path)?;
    let mut dialogues: BTreeMap<String, Dialogue> = BTreeMap::new();
    for (n, line) in numbered_lines(&text) {
        let source = format!("{}:{n}", dialogues_path.display());
        match parse_dialogue(line, ParseMode::Strict) {
            Ok(d) => {
                if dialogues.contains_key(&d.id) {
                    entry(source, Some(&d.id), None, None, "DuplicateDialogue".into(), "dialogue id seen before".into());
                } else {
                    dialogues.insert(d.id.clone(), d);
                }
            }
            Err(TrajectoryError::StructuralViolation { rule, location, message }) => {
                entry(source, None, location.turn, None, rule.to_string(), format!("{location}: {message}"));
            }
            Err(e) => entry(source, None, None, None, variant_name(&e), e.to_string()),
        }
    }

    let mut checklists: BTreeMap<(String, u32), Checklist> = BTreeMap::new();
    if let Some(path) = checklists_path {
        let text = run.read(path)?;
        for (n, line) in numbered_lines(&text) {
            let source = format!("{}:{n}", path.display());
            let doc: ChecklistDocument = match serde_json::from_str(line) {
                Ok(doc) => doc,
                Err(e) => {
                    entry(source, None, None, None, "Malformed".into(), e.to_string());
                    continue;
                }
            };
            let id = doc.dialogue_id.as_str();
            let Some(d) = dialogues.get(id) else {
                entry(source, Some(id), Some(doc.turn), None, "UnknownDialogue".into(), "no such dialogue".into());
                continue;
            };
            if d.turn(doc.turn).is_none() {
                entry(source, Some(id), Some(doc.turn), None, "UnknownTurn".into(), "dialogue has no such turn".into());
                continue;
            }
            let cl = Checklist::new(doc.turn, doc.items);
            for v in validate_checklist(&cl).violations {
                let message = serde_json::to_string(&v.kind).expect("violation serializes");
                entry(source.clone(), Some(id), Some(cl.turn_index), v.item.as_deref(), v.kind.name().into(), message);
            }
            for item in &cl.items {
                for &(t, s) in &item.evidence {
                    let ok = d.turn(t).is_some_and(|turn| s >= 1 && s as usize <= turn.steps.len());
                    if !ok {
                        let kind = ViolationKind::UnresolvedEvidence { turn: t, step: s };
                        entry(source.clone(), Some(id), Some(cl.turn_index), Some(&item.id), kind.name().into(), format!("no step ({t}, {s})"));
                    }
                }
            }
            let key = (id.to_owned(), cl.turn_index);
            if checklists.contains_key(&key) {
                entry(source, Some(id), Some(cl.turn_index), None, "DuplicateChecklist".into(), "second checklist for this turn".into());
            } else {
                checklists.insert(key, cl);
            }
        }
        for d in dialogues.values() {
            for t in 1..=d.len() as u32 {
                if !checklists.contains_key(&(d.id.clone(), t)) {
                    entry(path.display().to_string(), Some(&d.id), Some(t), None, "MissingChecklist".into(), "turn has no checklist".into());
                }
            }
        }
    }

    if let Some(path) = predicates_path {
        let text = run.read(path)?;
        for (n, line) in numbered_lines(&text) {
            let source = format!("{}:{n}", path.display());
            let doc: PredicateDocument = match serde_json::from_str(line) {
                Ok(doc) => doc,
                Err(e) => {
                    entry(source, None, None, None, "MalformedPredicate".into(), e.to_string());
                    continue;
                }
            };
            let judge = match scripted_predicates(&doc) {
                Ok(j) => j,
                Err(e) => {
                    entry(source, Some(&doc.dialogue_id), None, None, variant_name(&e), e.to_string());
                    continue;
                }
            };
            for ((id, turn), cl) in checklists.range((doc.dialogue_id.clone(), 0)..=(doc.dialogue_id.clone(), u32::MAX)) {
                let bound: BTreeSet<&str> = judge
                    .turns
                    .get(turn)
                    .map(|m| m.keys().map(String::as_str).collect())
                    .unwrap_or_default();
                for item in cl.ids().filter(|i| !bound.contains(i)) {
                    let e = JudgeError::UnboundItemId(format!("{id} turn {turn}: {item}"));
                    entry(source.clone(), Some(id), Some(*turn), Some(item), variant_name(&e), e.to_string());
                }
            }
        }
    }

    for e in &entries {
        println!("{} [{}] {}", e.source, e.rule, e.message);
    }
    if run.out_dir()?.is_some() {
        run.emit("validation.jsonl", &to_lines(&entries))?;
    }
    println!("{} violation(s)", entries.len());
    Ok(if entries.is_empty() { Outcome::Success } else { Outcome::Failure })
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

fn filter(run: &mut Run, input: &Path) -> Result<Outcome, CliError> {
    let text = run.read(input)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let config = run.config.filter.clone();
    let reports = filter_corpus(&lines, &config);
    let stats = corpus_stats(&lines, &config);
    let mut passed = Vec::new();
    let mut rejects = Vec::new();
    for (line, report) in lines.iter().zip(&reports) {
        match report.verdict {
            Verdict::Pass => {
                passed.extend_from_slice(line.as_bytes());
                passed.push(b'\n');
            }
            Verdict::Reject => rejects.push(report.clone()),
        }
    }
    run.emit("passed.jsonl", &passed)?;
    run.emit("rejects.jsonl", &to_lines(&rejects))?;
    let mut stats_text = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    stats_text.push(b'\n');
    run.emit("stats.json", &stats_text)?;
    println!("{} dialogue(s): {} passed, {} rejected", stats.dialogues, stats.passed, stats.rejected);
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

fn rollout(
    run: &mut Run,
    dialogues_path: &Path,
    checklists_path: &Path,
    predicates_path: Option<&Path>,
) -> Result<Outcome, CliError> {
    let cfg = run.config.rollout.clone();
    let input = |e: String| CliError::Input(e);
    let text = run.read(dialogues_path)?;
    let dialogues = checklist_rl::trajectory::parse_dialogues(&text, ParseMode::Strict)
        .map_err(|(n, e)| input(format!("{}:{n}: {e}", dialogues_path.display())))?;
    let text = run.read(checklists_path)?;
    let docs = checklist_rl::checklist::parse_checklist_documents(&text).map_err(|e| input(e.to_string()))?;
    let annotated = checklist_rl::checklist::load_annotations(dialogues, docs).map_err(|e| input(e.to_string()))?;

    let mut judges: BTreeMap<String, JudgeSpec> = BTreeMap::new();
    if let Some(endpoint) = &cfg.judge_endpoint {
        let external = JudgeSpec::External(ExternalJudge {
            client: Client::http(endpoint.clone()),
        });
        for a in &annotated {
            judges.insert(a.dialogue.id.clone(), external.clone());
        }
    } else {
        let path = predicates_path
            .ok_or_else(|| input("rollout needs --predicates or a judge endpoint".into()))?;
        let text = run.read(path)?;
        for doc in checklist_rl::judge::parse_predicate_documents(&text).map_err(|e| input(e.to_string()))? {
            let judge = scripted_predicates(&doc).map_err(|e| input(e.to_string()))?;
            judges.insert(doc.dialogue_id.clone(), JudgeSpec::scripted(judge));
        }
    }
    let sim = match &cfg.simulator {
        SimulatorChoice::Echo => SimulatorSpec::Echo,
        SimulatorChoice::Templates(path) => {
            let text = run.read(path)?;
            SimulatorSpec::from_template_file(&text).map_err(|e| input(format!("{}: {e}", path.display())))?
        }
        SimulatorChoice::External(endpoint) => SimulatorSpec::External {
            client: Client::http(endpoint.clone()),
            fewshot_from_dialogue: true,
            max_exemplars: 3,
        },
    };
    let options = RolloutOptions {
        budget: cfg.budget,
        judge_retries: cfg.judge_retries,
        denominator: cfg.denominator,
    };

    let mut records: Vec<RolloutRecord> = Vec::new();
    let mut table_csv = Vec::new();
    for a in &annotated {
        let id = &a.dialogue.id;
        let clean = judges
            .get(id)
            .cloned()
            .ok_or_else(|| input(format!("no predicates for dialogue `{id}`")))?;
        let judge = if cfg.judge_noise > 0.0 {
            JudgeSpec::noisy(clean, cfg.judge_noise, cfg.seed).map_err(|e| input(e.to_string()))?
        } else {
            clean
        };
        let store = build_replay_store(&a.dialogue);
        let env = Environment {
            annotated: a,
            judge: &judge,
            store: &store,
            sim: &sim,
        };
        let policy = build_policy(&cfg.policy, a);
        if cfg.group_size <= 1 {
            records.push(run_rollout(env, policy.as_ref(), &options, id, 0, cfg.seed));
            continue;
        }
        let (group, group_records) = run_group(env, policy.as_ref(), &options, id, cfg.group_size, cfg.seed)
            .map_err(|e| input(e.to_string()))?;
        for g in Granularity::ALL {
            let table = advantages(&group, g, cfg.normalizer).map_err(|e| input(e.to_string()))?;
            let header = table_csv.is_empty();
            table
                .write_csv(id, &mut table_csv, header)
                .map_err(|e| input(e.to_string()))?;
        }
        records.extend(group_records);
    }

    for r in &records {
        println!(
            "{} #{}: {} R={:.4}",
            r.group_id,
            r.rollout_index,
            serde_json::to_string(&r.termination).expect("termination serializes"),
            r.summary.trajectory
        );
    }
    let mut lines = Vec::new();
    for r in &records {
        lines.extend(r.to_json_line().into_bytes());
        lines.push(b'\n');
    }
    run.emit("rollouts.jsonl", &lines)?;
    if !table_csv.is_empty() {
        run.emit("advantages.csv", &table_csv)?;
    }
    Ok(Outcome::Success)
}

fn build_policy<'a>(choice: &PolicyChoice, a: &'a AnnotatedDialogue) -> Box<dyn Policy + 'a> {
    match choice {
        PolicyChoice::Reference => Box::new(ReferencePolicy { reference: &a.dialogue }),
        PolicyChoice::Reply(text) => Box::new(ReplyOnlyPolicy { reply: text.clone() }),
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn curve_file_name(c: &checklist_rl::toyrl::TrainConfig) -> String {
    format!("curves-{}-G{}-eps{}.csv", c.granularity.name(), c.group_size, c.judge_noise)
}

fn train_cmd(run: &mut Run) -> Result<Outcome, CliError> {
    let task = generate_task(&run.config.task);
    let settings = run.config.sweep.expand(&run.config.train);
    for cfg in &settings {
        let curves: Vec<LearningCurve> = train(cfg, &task).map_err(|e| CliError::Input(e.to_string()))?;
        let mut bytes = Vec::new();
        write_curves(&curves, &mut bytes).map_err(|e| CliError::Input(e.to_string()))?;
        let name = curve_file_name(cfg);
        let finals: Vec<String> = curves
            .iter()
            .filter_map(|c| c.last().map(|(_, r)| format!("{r:.3}")))
            .collect();
        println!("{name}: final R per seed [{}]", finals.join(", "));
        run.emit(&name, &bytes)?;
    }
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn report(run: &mut Run, paths: &[PathBuf]) -> Result<Outcome, CliError> {
    let mut curves = Vec::new();
    for path in paths {
        let text = run.read(path)?;
        let mut these = read_curves(text.as_bytes()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        curves.append(&mut these);
    }
    let summaries =
        summarize(&curves, run.config.report.early_fraction).map_err(CliError::Input)?;
    let csv_err = |e: csv::Error| CliError::Input(e.to_string());
    let mut summary = Vec::new();
    write_summary(&summaries, &mut summary).map_err(csv_err)?;
    let mut means = Vec::new();
    write_mean_curves(&summaries, &mut means).map_err(csv_err)?;
    let mut comparisons = Vec::new();
    write_comparisons(&summaries, &mut comparisons).map_err(csv_err)?;
    print!("{}", String::from_utf8_lossy(&summary));
    run.emit("summary.csv", &summary)?;
    run.emit("mean_curves.csv", &means)?;
    run.emit("comparisons.csv", &comparisons)?;

    let checks = run.config.report.checks.clone();
    if checks.is_empty() {
        return Ok(Outcome::Success);
    }
    let results: Vec<_> = checks.iter().map(|c| evaluate(c, &summaries)).collect();
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let mut bytes = serde_json::to_vec_pretty(&results).expect("results serialize");
    bytes.push(b'\n');
    run.emit("checks.json", &bytes)?;
    Ok(if results.iter().all(|r| r.pass) { Outcome::Success } else { Outcome::Failure })
}

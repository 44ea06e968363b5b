//! Acceptance gate: runs every criterion at its stated tolerance and
//! prints one PASS/FAIL line each. Built without the libtest harness so
//! the lines always reach the output; exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use checklist_rl::advantage::oracle::{brute_force_advantages, brute_force_rewards, random_group};
use checklist_rl::advantage::{
    advantages, step_advantage, trajectory_advantage, turn_advantage, Granularity, GroupRewards, NormalizerSpec,
    RolloutRewards,
};
use checklist_rl::checklist::{AnnotatedDialogue, Checklist};
use checklist_rl::datapipe::corpus::violation_corpus;
use checklist_rl::datapipe::{filter_dialogue, FilterConfig, FilterRule};
use checklist_rl::fixtures;
use checklist_rl::judge::{JudgeSpec, JudgeVerdict};
use checklist_rl::reward::{latch_trace, reward_grid, turn_reward, TurnDenominator};
use checklist_rl::rollout::{
    run_rollout, Environment, Policy, PolicyError, ReferencePolicy, ReplyOnlyPolicy, RolloutOptions, Termination,
};
use checklist_rl::toolsim::{build_replay_store, execute, SimulatorSpec, Source};
use checklist_rl::toyrl::{surrogate, surrogate_gradient, Sample, SoftmaxPolicy, StateKey};
use checklist_rl::trajectory::{Dialogue, HistoryPrefix, PrefixOptions, Step, ToolCall, Turn};
use common::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::tempdir;

type Outcome = Result<String, String>;
/// File name and contents, sorted by name.
type Files = Vec<(String, Vec<u8>)>;
type Criterion<'a> = (&'a str, Box<dyn FnOnce() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    ensure(spent <= budget, || format!("took {spent:.1?}, budget {budget:?}"))
}

// ----- 1 -----

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let instances = 1000;
    let mut compared = 0usize;
    let mut worst: f64 = 0.0;
    for n in 0..instances {
        let g = random_group(&mut rng);
        let oracle = brute_force_rewards(&g).map_err(|e| e.to_string())?;
        for (i, (r, o)) in g.rollouts.iter().zip(&oracle).enumerate() {
            worst = worst.max((r.trajectory() - o.trajectory).abs());
            for (t, tr) in &r.turns {
                let ot = &o.turns[t];
                ensure(tr.grid.flip == ot.flip && tr.grid.backfill == ot.backfill, || {
                    format!("instance {n} rollout {i} turn {t}: grid differs")
                })?;
                worst = worst.max((tr.reward - ot.reward).abs());
            }
        }
        for gran in Granularity::ALL {
            for spec in [NormalizerSpec::constant(), NormalizerSpec::std_dev(1e-8)] {
                let prod = advantages(&g, gran, spec).map_err(|e| e.to_string())?;
                let brute = brute_force_advantages(&g, gran, spec).map_err(|e| e.to_string())?;
                ensure(prod.values.len() == brute.values.len(), || {
                    format!("instance {n} {gran:?}: coverage differs")
                })?;
                for (k, v) in &prod.values {
                    worst = worst.max((v - brute.values[k]).abs());
                    compared += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs difference {worst:e}"))?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "{instances} instances, {compared} advantages, max abs diff {worst:e}, {:.1?}",
        start.elapsed()
    ))
}

// ----- 2 -----

fn fuzz_case(g: &GroupRewards) -> Result<(), String> {
    for (i, r) in g.rollouts.iter().enumerate() {
        ensure((0.0..=1.0 + 1e-12).contains(&r.trajectory()), || format!("R = {}", r.trajectory()))?;
        for (t, tr) in &r.turns {
            let cl = &g.checklists[t];
            ensure((-1e-12..=1.0 + 1e-12).contains(&tr.reward), || format!("R_{t} = {}", tr.reward))?;
            for item in &cl.items {
                let flip = &tr.grid.flip[&item.id];
                let back = &tr.grid.backfill[&item.id];
                ensure(flip.iter().filter(|f| **f).count() <= 1, || format!("rollout {i}: {} flips twice", item.id))?;
                for s in 1..=flip.len() {
                    if flip[s - 1] {
                        ensure(back[s - 1], || format!("{}: flip outside backfill", item.id))?;
                        for d in &item.dependencies {
                            ensure(tr.trace.state(d, s - 1), || {
                                format!("{} flipped at {s} before dependency {d}", item.id)
                            })?;
                        }
                    }
                }
                let on: Vec<usize> = (1..=back.len()).filter(|s| back[s - 1]).collect();
                if let (Some(&lo), Some(&hi)) = (on.first(), on.last()) {
                    ensure(on.len() == hi - lo + 1, || format!("{}: backfill not contiguous", item.id))?;
                    ensure(tr.grid.flip_step(&item.id) == Some(hi), || format!("{}: backfill does not end at the flip", item.id))?;
                }
            }
        }
    }
    let spec = NormalizerSpec::constant();
    let traj = trajectory_advantage(g, spec).map_err(|e| e.to_string())?;
    let rs = g.trajectory();
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    let mut per_rollout: Vec<Option<f64>> = vec![None; rs.len()];
    for (&(i, _, _), &v) in &traj.values {
        ensure(per_rollout[i].is_none_or(|a| a == v), || format!("rollout {i}: advantage varies across steps"))?;
        per_rollout[i] = Some(v);
        ensure((v - (rs[i] - mean)).abs() < 1e-12, || format!("rollout {i}: advantage {v}"))?;
    }
    // Rollouts without steps have no table entry; the sum is checked when
    // every rollout is materialized.
    if per_rollout.iter().all(Option::is_some) {
        let sum: f64 = per_rollout.iter().flatten().sum();
        ensure(sum.abs() < 1e-9, || format!("trajectory advantages sum to {sum:e}"))?;
    }
    let turn = turn_advantage(g, spec).map_err(|e| e.to_string())?;
    for &t in g.checklists.keys() {
        let reached = g.per_turn(t);
        let values: Vec<f64> = reached.iter().filter_map(|(i, _)| turn.get(*i, t, 1)).collect();
        if reached.len() >= 2 && values.len() == reached.len() {
            let sum: f64 = values.iter().sum();
            ensure(sum.abs() < 1e-9, || format!("turn {t} advantages sum to {sum:e}"))?;
        }
    }
    step_advantage(g, spec).map_err(|e| e.to_string())?;
    Ok(())
}

fn invariant_fuzz() -> Outcome {
    let cases = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7_777);
    for n in 0..cases {
        let g = random_group(&mut rng);
        fuzz_case(&g).map_err(|e| format!("case {n}: {e}"))?;
    }
    Ok(format!("{cases} random groups, zero violations"))
}

// ----- 3 -----

fn verdicts(cl: &Checklist, raw: &[&[bool]]) -> Vec<JudgeVerdict> {
    (0..raw[0].len())
        .map(|s| JudgeVerdict {
            turn_index: cl.turn_index,
            step_index: s as u32 + 1,
            labels: cl.ids().zip(raw).map(|(id, l)| (id.to_owned(), l[s])).collect(),
        })
        .collect()
}

fn worked_fixture() -> Outcome {
    const T: bool = true;
    const F: bool = false;
    let cl = fixtures::f3_checklist();
    let weights: Vec<f64> = cl.items.iter().map(|i| i.weight).collect();
    ensure(weights == [0.5, 0.3, 0.2], || format!("weights {weights:?}"))?;
    let perfect: &[&[bool]] = &[&[T, F, F], &[F, T, F], &[F, F, T]];
    let no_c3: &[&[bool]] = &[&[T, F, F], &[F, T, F], &[F, F, F]];
    let no_c2: &[&[bool]] = &[&[T, F, F], &[F, F, F], &[F, T, F]];
    let trace = |raw| latch_trace(&cl, &verdicts(&cl, raw)).unwrap();
    let r = turn_reward(&reward_grid(&trace(perfect), &cl), &cl);
    ensure(r == 1.0, || format!("perfect turn reward {r}"))?;

    let checklists = [(1, cl.clone())].into_iter().collect();
    let rollouts = [perfect, perfect, no_c3, no_c2]
        .into_iter()
        .map(|raw| RolloutRewards::from_traces(&checklists, vec![trace(raw)], 1, TurnDenominator::Reference).unwrap())
        .collect();
    let group = GroupRewards { checklists, rollouts };
    let table = step_advantage(&group, NormalizerSpec::constant()).map_err(|e| e.to_string())?;
    let a = table.get(2, 1, 2).ok_or("no advantage at rollout 2, step 2")?;
    ensure((a - -0.15).abs() < 1e-12, || format!("mixed-eligibility step advantage {a}"))?;
    Ok(format!("turn reward {r}, mixed-eligibility step advantage {a}"))
}

// ----- 4 -----

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let policies = 25;
    let mut worst: f64 = 0.0;
    for _ in 0..policies {
        let actions = rng.gen_range(2..7);
        let states = rng.gen_range(1..5);
        let mut policy = SoftmaxPolicy::new(actions, rng.gen_range(0.5..2.0));
        for k in 0..states {
            let key = StateKey { turn: 1 + k % 2, satisfied: k };
            policy.logits.insert(key, (0..actions).map(|_| rng.gen_range(-2.0..2.0)).collect());
        }
        let keys: Vec<StateKey> = policy.logits.keys().copied().collect();
        let samples: Vec<Sample> = (0..16)
            .map(|_| Sample {
                state: keys[rng.gen_range(0..keys.len())],
                action: rng.gen_range(0..actions),
                advantage: rng.gen_range(-2.0..2.0),
            })
            .collect();
        let beta = rng.gen_range(0.0..0.2);
        let scale = 8.0;
        let grad = surrogate_gradient(&policy, &samples, beta, scale);
        for key in &keys {
            for j in 0..actions {
                let at = |d: f64| {
                    let mut p = policy.clone();
                    p.logits.get_mut(key).unwrap()[j] += d;
                    surrogate(&p, &samples, beta, scale)
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                worst = worst.max((fd - grad.get(key).map_or(0.0, |g| g[j])).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("{policies} random policies, max abs error {worst:e}"))
}

// ----- 5 and 6 -----

fn acceptance_config() -> PathBuf {
    repo_root().join("configs/acceptance.toml")
}

/// Trains the pinned sweep once and reports on it; returns the check
/// results keyed by name.
fn learning_curves() -> Result<Vec<Value>, String> {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let cfg = acceptance_config();
    let train_out = dir.path().join("train");
    let o = run(&["--config", p(&cfg), "--out", p(&train_out), "train"]);
    ensure(code(&o) == 0, || format!("train exited {}: {}", code(&o), String::from_utf8_lossy(&o.stderr)))?;
    let mut args = vec!["--config".to_owned(), p(&cfg).to_owned(), "--out".into()];
    let report_out = dir.path().join("report");
    args.push(p(&report_out).into());
    args.push("report".into());
    for e in fs::read_dir(&train_out).map_err(|e| e.to_string())? {
        let path = e.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            args.push(p(&path).to_owned());
        }
    }
    let o = bin().args(&args).output().map_err(|e| e.to_string())?;
    ensure(code(&o) <= 1, || format!("report exited {}", code(&o)))?;
    let checks = read_json(&report_out.join("checks.json"));
    Ok(checks.as_array().cloned().unwrap_or_default())
}

fn check_line(checks: &[Value], name: &str) -> Result<String, String> {
    let c = checks
        .iter()
        .find(|c| c["name"] == name)
        .ok_or_else(|| format!("check {name} missing from the report"))?;
    let line = format!(
        "{name}: {} (margin {:.4} vs pooled SE {:.4})",
        c["detail"].as_str().unwrap_or(""),
        c["margin"].as_f64().unwrap_or(f64::NAN),
        c["pooled_se"].as_f64().unwrap_or(f64::NAN)
    );
    if c["pass"] == true {
        Ok(line)
    } else {
        Err(line)
    }
}

fn granularity_orderings(checks: &Result<Vec<Value>, String>) -> Outcome {
    let checks = checks.as_ref().map_err(Clone::clone)?;
    let early = check_line(checks, "step-leads-early")?;
    let last = check_line(checks, "trajectory-leads-final")?;
    Ok(format!("{early}; {last}"))
}

fn group_size_ordering(checks: &Result<Vec<Value>, String>) -> Outcome {
    let checks = checks.as_ref().map_err(Clone::clone)?;
    check_line(checks, "larger-group-leads-final")
}

// ----- 7 -----

fn env_run(a: &AnnotatedDialogue, policy: &dyn Policy) -> checklist_rl::rollout::RolloutRecord {
    env_run_with(a, &fixtures::clean_judge(&a.dialogue.id), policy)
}

fn env_run_with(a: &AnnotatedDialogue, judge: &JudgeSpec, policy: &dyn Policy) -> checklist_rl::rollout::RolloutRecord {
    let store = build_replay_store(&a.dialogue);
    let env = Environment {
        annotated: a,
        judge,
        store: &store,
        sim: &SimulatorSpec::Echo,
    };
    run_rollout(env, policy, &RolloutOptions::default(), "gate", 0, 11)
}

/// Plays `script[turn - 1][k]` as the k-th action of each turn.
fn scripted(script: Vec<Vec<Step>>) -> impl Policy {
    move |p: &HistoryPrefix, _: &mut ChaCha8Rng| {
        script
            .get(p.current_turn() as usize - 1)
            .and_then(|t| t.get(p.actions_in_turn()))
            .cloned()
            .ok_or_else(|| PolicyError("script exhausted".into()))
    }
}

fn call(name: &str, args: Value) -> Step {
    Step::calls(None, vec![ToolCall::new(name, args)])
}

fn strictness_gate() -> Outcome {
    let two = fixtures::two_turn();
    let search = call("search", json!({"query": "flights Oslo"}));
    let book = call("book", json!({"flight_id": "F7"}));
    let failing: Vec<(&str, Box<dyn Policy>)> = vec![
        ("reply only", Box::new(ReplyOnlyPolicy { reply: "hello".into() })),
        ("no confirmation", Box::new(scripted(vec![vec![search.clone(), book.clone(), Step::reply(None, "done")]]))),
        (
            "reply before its dependency",
            Box::new(scripted(vec![vec![Step::reply(None, "booked"), search.clone()]])),
        ),
    ];
    for (name, policy) in &failing {
        let rec = env_run(&two, policy.as_ref());
        ensure(rec.termination == Termination::StrictnessGateFailed { turn: 1 }, || {
            format!("{name}: {:?}", rec.termination)
        })?;
        ensure(rec.dialogue.turns.len() == 1 && rec.verdicts.iter().all(|v| v.turn_index == 1), || {
            format!("{name}: steps recorded after the gate")
        })?;
    }
    let f3 = fixtures::f3();
    let two_ref = two.dialogue.clone();
    let f3_ref = f3.dialogue.clone();
    let reworded = scripted(vec![
        vec![
            call("search", json!({"query": "cheap flights to Oslo"})),
            call("book", json!({"flight_id": "F7"})),
            Step::reply(None, "All set, F7 is booked."),
        ],
        vec![call("email", json!({"flight_id": "F7"})), Step::reply(None, "I sent it.")],
    ]);
    let perfect: Vec<(&str, &AnnotatedDialogue, Box<dyn Policy + '_>)> = vec![
        ("reference, one turn", &f3, Box::new(ReferencePolicy { reference: &f3_ref })),
        ("reference, two turns", &two, Box::new(ReferencePolicy { reference: &two_ref })),
        ("reworded, two turns", &two, Box::new(reworded)),
    ];
    for (name, a, policy) in &perfect {
        let rec = env_run(a, policy.as_ref());
        ensure(rec.termination == Termination::Completed, || format!("{name}: {:?}", rec.termination))?;
        ensure(rec.summary.trajectory == 1.0, || format!("{name}: R = {}", rec.summary.trajectory))?;
    }
    Ok("3 failing scenarios gated at turn 1, 3 perfect scenarios completed".into())
}

// ----- 8 -----

/// Respells a JSON number: integers gain a fraction or an exponent,
/// fractions move to exponent form.
fn respell(v: &Value, rng: &mut ChaCha8Rng) -> String {
    match v {
        Value::Number(n) if n.is_i64() => {
            let i = n.as_i64().unwrap();
            if rng.gen_bool(0.5) {
                format!("{i}.0")
            } else {
                format!("{}e1", i as f64 / 10.0)
            }
        }
        Value::Number(n) => format!("{:e}", n.as_f64().unwrap()),
        other => other.to_string(),
    }
}

fn simulator_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let recorded_n = 100;
    let mut recorded: Vec<(String, Value, String)> = Vec::new();
    let mut steps = vec![Step::user("Look things up.")];
    for i in 0..recorded_n {
        let tool = ["search", "book", "email"][i % 3];
        let args = json!({
            "query": format!("q{i}"),
            "limit": rng.gen_range(1..50) * 10 + i as i64,
            "score": (rng.gen_range(1..400) as f64) / 8.0,
            "page": {"n": i, "tags": ["a", "b"]},
        });
        let response = format!("{{\"hit\":{i},\"nonce\":\"{:08x}\"}}", rng.next_u32());
        steps.push(Step::calls(None, vec![ToolCall::new(tool, args.clone())]));
        steps.push(Step::tool_response(response.clone(), Some(0)));
        recorded.push((tool.to_owned(), args, response));
    }
    steps.push(Step::reply(None, "done"));
    let dialogue = Dialogue {
        id: "sim".into(),
        tools: fixtures::f3_dialogue().tools,
        system_prompt: None,
        turns: vec![Turn {
            index: 1,
            steps,
            incomplete: false,
        }],
    };
    let store = build_replay_store(&dialogue);
    let prefix = dialogue
        .history_prefix(1, 1, PrefixOptions::default())
        .map_err(|e| e.to_string())?;

    let mut replayed = 0;
    for (tool, args, response) in &recorded {
        // Reverse the key order and respell every number in the text.
        let obj = args.as_object().unwrap();
        let fields: Vec<String> = obj
            .iter()
            .rev()
            .map(|(k, v)| {
                let text = match v {
                    Value::Object(inner) => {
                        let n = respell(&inner["n"], &mut rng);
                        format!("{{\"tags\":[\"a\",\"b\"],\"n\":{n}}}")
                    }
                    _ => respell(v, &mut rng),
                };
                format!("\"{k}\":{text}")
            })
            .collect();
        let text = format!("{{\"name\":\"{tool}\",\"arguments\":{{{}}}}}", fields.join(","));
        let call: ToolCall = serde_json::from_str(&text).map_err(|e| format!("{text}: {e}"))?;
        let out = execute(&store, &SimulatorSpec::Echo, &call, &prefix).map_err(|e| e.to_string())?;
        ensure(out.source == Source::Replayed && &out.response == response, || {
            format!("recorded call {text} was not replayed byte-identically")
        })?;
        replayed += 1;
    }
    let mut simulated = 0;
    for (i, (tool, args, _)) in recorded.iter().enumerate() {
        let mut novel = args.clone();
        match i % 4 {
            0 => novel["limit"] = json!(args["limit"].as_i64().unwrap() + 1),
            1 => novel["query"] = json!(format!("{}x", args["query"].as_str().unwrap())),
            2 => novel["page"]["tags"] = json!(["b", "a"]),
            _ => {
                novel.as_object_mut().unwrap().remove("score");
            }
        }
        let out = execute(&store, &SimulatorSpec::Echo, &ToolCall::new(tool.clone(), novel), &prefix)
            .map_err(|e| e.to_string())?;
        ensure(out.source == Source::Simulated, || format!("novel call {i} was replayed"))?;
        simulated += 1;
    }
    Ok(format!("{replayed}/{recorded_n} recorded calls replayed, {simulated}/{recorded_n} novel calls simulated"))
}

// ----- 9 -----

fn filter_corpus() -> Outcome {
    let corpus = violation_corpus();
    let config = FilterConfig::default();
    let mut per_rule = Vec::new();
    for rule in FilterRule::ALL {
        let (mut tp, mut fp, mut fneg, mut positives) = (0, 0, 0, 0);
        for entry in &corpus {
            let flagged: BTreeSet<FilterRule> = filter_dialogue(&entry.line, &config).rules().into_iter().collect();
            let labeled = entry.rules.contains(&rule);
            match (labeled, flagged.contains(&rule)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
            if labeled {
                positives += 1;
            }
        }
        let id = rule.id();
        ensure(positives >= 3, || format!("rule {id}: {positives} positives"))?;
        ensure(fp == 0 && fneg == 0, || format!("rule {id}: {fp} false positives, {fneg} false negatives"))?;
        per_rule.push(format!("{id}:{tp}"));
    }
    let clean = corpus.iter().filter(|e| e.rules.is_empty()).count();
    ensure(clean >= 3 * FilterRule::ALL.len(), || format!("{clean} clean fixtures"))?;
    Ok(format!(
        "{} fixtures ({clean} clean), precision and recall 1.0 for every rule (true positives {})",
        corpus.len(),
        per_rule.join(" ")
    ))
}

// ----- 10 -----

fn all_files(dir: &Path) -> Files {
    let mut out: Files = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let [d, c, pr] = write_f3(dir.path());
    let cfg = dir.path().join("small.toml");
    fs::write(
        &cfg,
        "[train]\nupdates = 30\neval_every = 10\nvalidation_rollouts = 8\njudge_noise = 0.2\nseeds = [0, 1, 2]\n\
         [sweep]\ngranularities = [\"trajectory\", \"step\"]\n",
    )
    .unwrap();
    let mut checked = Vec::new();
    let mut runs: Vec<[Files; 3]> = Vec::new();
    for _ in 0..2 {
        // Same paths both times, so the manifests must match as well.
        let root = dir.path().join("run");
        if root.exists() {
            fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        }
        let rollout = root.join("rollout");
        let train = root.join("train");
        let report = root.join("report");
        let rollout_args = ["--group-size", "8", "--judge-noise", "0.3", "--out", p(&rollout), "rollout", p(&d), "--checklists", p(&c), "--predicates", p(&pr)];
        let train_args = ["--config", p(&cfg), "--out", p(&train), "train"];
        for args in [&rollout_args[..], &train_args[..]] {
            let o = run(args);
            ensure(code(&o) == 0, || format!("{args:?} exited {}", code(&o)))?;
        }
        let mut report_args: Vec<String> = vec!["--out".into(), p(&report).into(), "report".into()];
        for (name, _) in all_files(&train) {
            if name.ends_with(".csv") {
                report_args.push(p(&train.join(name)).into());
            }
        }
        let o = bin().args(&report_args).output().map_err(|e| e.to_string())?;
        ensure(code(&o) == 0, || format!("report exited {}", code(&o)))?;
        runs.push([all_files(&rollout), all_files(&train), all_files(&report)]);
    }
    for (k, name) in ["rollout", "train", "report"].iter().enumerate() {
        let (a, b) = (&runs[0][k], &runs[1][k]);
        let names = |v: &Files| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        ensure(names(a) == names(b), || format!("{name}: different file sets"))?;
        for ((file, x), (_, y)) in a.iter().zip(b) {
            ensure(x == y, || format!("{name}: {file} differs between runs"))?;
        }
        let manifest: Value = serde_json::from_slice(&a.iter().find(|(n, _)| n == "manifest.json").unwrap().1).unwrap();
        let artifacts = manifest["artifacts"].as_object().cloned().unwrap_or_default();
        for (file, sum) in &artifacts {
            let bytes = &a.iter().find(|(n, _)| n == file).ok_or(format!("{name}: {file} missing"))?.1;
            ensure(sha256(bytes) == *sum, || format!("{name}: checksum of {file} does not match its manifest"))?;
        }
        checked.push(format!("{name} {} artifacts", artifacts.len()));
    }
    Ok(format!("2 runs byte-identical: {}", checked.join(", ")))
}

fn sha256(bytes: &[u8]) -> Value {
    Value::String(checklist_rl_cli::manifest::sha256_hex(bytes))
}

// ----- driver -----

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    })
}

fn main() {
    let start = Instant::now();
    let curves = guarded(|| {
        let t = Instant::now();
        let checks = learning_curves()?;
        within_budget(t, Duration::from_secs(600))?;
        Ok(serde_json::to_string(&checks).unwrap())
    })
    .map(|s| serde_json::from_str::<Vec<Value>>(&s).unwrap());

    let criteria: Vec<Criterion> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("invariant fuzz", Box::new(invariant_fuzz)),
        ("worked fixture", Box::new(worked_fixture)),
        ("gradient check", Box::new(gradient_check)),
        ("granularity orderings under judge noise", Box::new(|| granularity_orderings(&curves))),
        ("group size ordering", Box::new(|| group_size_ordering(&curves))),
        ("strictness gate", Box::new(strictness_gate)),
        ("simulator fidelity", Box::new(simulator_fidelity)),
        ("filter corpus", Box::new(filter_corpus)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.into_iter().enumerate() {
        match guarded(f) {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1?}", 10 - failed, start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}

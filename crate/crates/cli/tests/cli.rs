//! End-to-end runs of the binary on small inputs.

mod common;

use std::fs;
use std::path::Path;

use checklist_rl::datapipe::corpus::violation_corpus;
use common::*;
use tempfile::tempdir;

const SMALL_TRAIN: &str = r#"
[train]
updates = 20
eval_every = 5
validation_rollouts = 8
group_size = 4
seeds = [0, 1]
"#;

/// Set `CHECKLIST_RL_BLESS=1` to rewrite the shipped sample files.
#[test]
fn shipped_sample_data_matches_fixtures() {
    let mut expected: Vec<(String, String)> = f3_files()
        .into_iter()
        .map(|(name, text)| (format!("data/f3/{name}"), text))
        .collect();
    let corpus: String = violation_corpus().iter().map(|l| format!("{}\n", l.line)).collect();
    expected.push(("data/filter/corpus.jsonl".into(), corpus));
    let bless = std::env::var_os("CHECKLIST_RL_BLESS").is_some();
    for (rel, text) in expected {
        let path = repo_root().join(&rel);
        if bless {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, &text).unwrap();
        }
        assert_eq!(fs::read_to_string(&path).unwrap_or_default(), text, "{rel} is stale");
    }
}

// ----- validate -----

#[test]
fn validate_accepts_the_sample_files() {
    let dir = tempdir().unwrap();
    let [d, c, pr] = write_f3(dir.path());
    let o = run(&["validate", p(&d), "--checklists", p(&c), "--predicates", p(&pr)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("0 violation(s)"));
}

#[test]
fn validate_names_a_weight_sum_violation() {
    let dir = tempdir().unwrap();
    let [d, c, _] = write_f3(dir.path());
    let text = fs::read_to_string(&c).unwrap().replacen("0.5", "0.6", 1);
    fs::write(&c, text).unwrap();
    let out = dir.path().join("out");
    let o = run(&["validate", p(&d), "--checklists", p(&c), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("WeightSumMismatch"), "{}", stdout(&o));
    let entries = jsonl(&out.join("validation.jsonl"));
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["rule"], "WeightSumMismatch");
    assert_eq!(entries[0]["dialogue"], "f3");
}

#[test]
fn validate_reports_unbound_predicates_and_missing_checklists() {
    let dir = tempdir().unwrap();
    let [d, c, pr] = write_f3(dir.path());
    // Drop the second turn's checklist and the `c2` predicate.
    let kept: String = fs::read_to_string(&c)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"turn\":2"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&c, kept).unwrap();
    let preds = fs::read_to_string(&pr).unwrap();
    let preds = preds.replace(r#""c2":"tool_called(name=\"book\", args.flight_id=\"F7\")","#, "");
    fs::write(&pr, preds).unwrap();
    let o = run(&["validate", p(&d), "--checklists", p(&c), "--predicates", p(&pr)]);
    assert_eq!(code(&o), 1);
    let s = stdout(&o);
    assert!(s.contains("MissingChecklist"), "{s}");
    assert!(s.contains("UnboundItemId"), "{s}");
}

#[test]
fn validate_flags_structural_errors_per_line() {
    let dir = tempdir().unwrap();
    let [d, ..] = write_f3(dir.path());
    let mut text = fs::read_to_string(&d).unwrap();
    text.push_str("{not json\n");
    fs::write(&d, text).unwrap();
    let o = run(&["validate", p(&d)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains(":3 ["), "{}", stdout(&o));
}

#[test]
fn missing_input_is_an_operational_error() {
    let o = run(&["validate", "/nonexistent/dialogues.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bad_flag_values_are_rejected() {
    assert_ne!(code(&run(&["--normalizer", "median", "train"])), 0);
    assert_ne!(code(&run(&["--rules", "9", "filter", "x"])), 0);
    assert_ne!(code(&run(&["--granularity", "episode", "train"])), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\nlearning_rte = 0.2\n").unwrap();
    assert_eq!(code(&run(&["--config", p(&cfg), "train"])), 2);
}

// ----- filter -----

#[test]
fn filter_partitions_the_violation_corpus() {
    let dir = tempdir().unwrap();
    let input = repo_root().join("data/filter/corpus.jsonl");
    let out = dir.path().join("out");
    let o = run(&["filter", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let corpus = violation_corpus();
    let dirty = corpus.iter().filter(|l| !l.rules.is_empty()).count();
    let rejects = jsonl(&out.join("rejects.jsonl"));
    assert_eq!(rejects.len(), dirty);
    let passed = fs::read_to_string(out.join("passed.jsonl")).unwrap();
    assert_eq!(passed.lines().count(), corpus.len() - dirty);
    let stats = read_json(&out.join("stats.json"));
    assert_eq!(stats["rejected"], dirty);
    assert_eq!(stats["dialogues"], corpus.len());
}

#[test]
fn filter_rule_subset_only_applies_those_rules() {
    let dir = tempdir().unwrap();
    let input = repo_root().join("data/filter/corpus.jsonl");
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["--rules", "5,6", "filter", p(&input), "--out", p(&out)])), 0);
    for r in jsonl(&out.join("rejects.jsonl")) {
        for v in r["violations"].as_array().unwrap() {
            let rule = v["rule"].as_u64().unwrap();
            assert!(rule == 5 || rule == 6, "{v}");
        }
    }
}

#[test]
fn filter_on_empty_input_writes_empty_outputs() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    fs::write(&input, "").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["filter", p(&input), "--out", p(&out)])), 0);
    assert_eq!(fs::read_to_string(out.join("passed.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(out.join("rejects.jsonl")).unwrap(), "");
    assert_eq!(read_json(&out.join("stats.json"))["dialogues"], 0);
}

// ----- rollout -----

fn rollout(dir: &Path, extra: &[&str]) -> (std::process::Output, std::path::PathBuf) {
    let [d, c, pr] = write_f3(dir);
    let out = dir.join("out");
    let mut args = vec!["rollout", p(&d), "--checklists", p(&c), "--predicates", p(&pr), "--out", p(&out)];
    args.extend_from_slice(extra);
    (run(&args), out.clone())
}

#[test]
fn reference_rollout_completes_with_full_reward() {
    let dir = tempdir().unwrap();
    let (o, out) = rollout(dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records = jsonl(&out.join("rollouts.jsonl"));
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r["termination"]["kind"], "completed");
        assert_eq!(r["summary"]["trajectory"], 1.0);
    }
    assert!(!out.join("advantages.csv").exists());
}

#[test]
fn fully_noisy_judge_fails_the_strictness_gate() {
    let dir = tempdir().unwrap();
    let (o, out) = rollout(dir.path(), &["--judge-noise", "1"]);
    assert_eq!(code(&o), 0);
    for r in jsonl(&out.join("rollouts.jsonl")) {
        assert_eq!(r["termination"]["kind"], "strictness_gate_failed");
        assert_eq!(r["termination"]["turn"], 1);
    }
}

#[test]
fn large_group_rollout_scores_every_granularity() {
    let dir = tempdir().unwrap();
    let (o, out) = rollout(dir.path(), &["--group-size", "48", "--judge-noise", "0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(jsonl(&out.join("rollouts.jsonl")).len(), 96);
    let table = fs::read_to_string(out.join("advantages.csv")).unwrap();
    for g in ["trajectory", "turn", "step"] {
        assert!(table.contains(g), "no {g} rows");
    }
}

#[test]
fn rollout_without_out_dir_is_an_error() {
    let dir = tempdir().unwrap();
    let [d, c, pr] = write_f3(dir.path());
    let o = run(&["rollout", p(&d), "--checklists", p(&c), "--predicates", p(&pr)]);
    assert_eq!(code(&o), 2);
}

// ----- train and report -----

fn train(dir: &Path, config: &str, extra: &[&str]) -> std::path::PathBuf {
    let cfg = dir.join("train.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("train");
    let mut args = vec!["--config", p(&cfg), "--out", p(&out)];
    args.extend_from_slice(extra);
    args.push("train");
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn curve_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("curves-"))
        .collect();
    names.sort();
    names
}

#[test]
fn train_sweeps_granularities() {
    let dir = tempdir().unwrap();
    let config = format!("{SMALL_TRAIN}\n[sweep]\ngranularities = [\"trajectory\", \"turn\", \"step\"]\n");
    let out = train(dir.path(), &config, &[]);
    assert_eq!(
        curve_files(&out),
        ["curves-step-G4-eps0.csv", "curves-trajectory-G4-eps0.csv", "curves-turn-G4-eps0.csv"]
    );
    assert_eq!(artifacts(&out).as_object().unwrap().len(), 3);
}

#[test]
fn train_sweeps_group_sizes_and_flags_collapse_the_sweep() {
    let dir = tempdir().unwrap();
    let config = format!("{SMALL_TRAIN}\n[sweep]\ngroup_sizes = [4, 16]\n");
    let out = train(dir.path(), &config, &["--judge-noise", "0.1"]);
    assert_eq!(curve_files(&out), ["curves-trajectory-G16-eps0.1.csv", "curves-trajectory-G4-eps0.1.csv"]);
    let dir = tempdir().unwrap();
    let out = train(dir.path(), &config, &["--group-size", "2"]);
    assert_eq!(curve_files(&out), ["curves-trajectory-G2-eps0.csv"]);
}

#[test]
fn seed_flag_shifts_the_seed_range() {
    let dir = tempdir().unwrap();
    let out = train(dir.path(), SMALL_TRAIN, &["--seed", "7"]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([7, 8]));
    assert_eq!(m["command"], "train");
}

#[test]
fn train_is_reproducible() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    let config = format!("{SMALL_TRAIN}\n[sweep]\ngranularities = [\"trajectory\", \"step\"]\n");
    assert_eq!(artifacts(&train(a.path(), &config, &[])), artifacts(&train(b.path(), &config, &[])));
}

fn write_curve(path: &Path, granularity: &str, g: usize, rows: &[(u64, [f64; 3])]) {
    let mut text = String::from("update,seed,granularity,G,epsilon,mean_R\n");
    for (seed, values) in rows {
        for (i, v) in values.iter().enumerate() {
            text.push_str(&format!("{},{seed},{granularity},{g},0.3,{v}\n", i * 10));
        }
    }
    fs::write(path, text).unwrap();
}

const CHECKS: &str = r#"
[[report.checks]]
name = "step-early"
phase = "early"
better = { granularity = "step", group_size = 8, epsilon = 0.3 }
worse = { granularity = "trajectory", group_size = 8, epsilon = 0.3 }

[[report.checks]]
name = "trajectory-final"
phase = "final"
better = { granularity = "trajectory", group_size = 8, epsilon = 0.3 }
worse = { granularity = "step", group_size = 8, epsilon = 0.3 }
"#;

fn report(dir: &Path, config: &str) -> (std::process::Output, std::path::PathBuf) {
    let cfg = dir.join("report.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("report");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    (run(&["--config", p(&cfg), "--out", p(&out), "report", p(&a), p(&b)]), out)
}

#[test]
fn report_passes_separated_orderings() {
    let dir = tempdir().unwrap();
    write_curve(&dir.path().join("a.csv"), "step", 8, &[(0, [0.0, 0.30, 0.50]), (1, [0.0, 0.32, 0.52])]);
    write_curve(&dir.path().join("b.csv"), "trajectory", 8, &[(0, [0.0, 0.10, 0.80]), (1, [0.0, 0.12, 0.82])]);
    let config = format!("[report]\nearly_fraction = 0.5\n{CHECKS}");
    let (o, out) = report(dir.path(), &config);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS step-early"));
    assert!(stdout(&o).contains("PASS trajectory-final"));
    let checks = read_json(&out.join("checks.json"));
    assert_eq!(checks.as_array().unwrap().len(), 2);
    let cmp = fs::read_to_string(out.join("comparisons.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 2);
    // Signs flip between update 10 and update 20.
    assert!(cmp.lines().nth(1).unwrap().ends_with(",20"), "{cmp}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("trajectory,8,0.3,2,10,"), "{summary}");
}

#[test]
fn report_fails_overlapping_orderings_with_exit_one() {
    let dir = tempdir().unwrap();
    write_curve(&dir.path().join("a.csv"), "step", 8, &[(0, [0.0, 0.1, 0.5]), (1, [0.0, 0.3, 0.9])]);
    write_curve(&dir.path().join("b.csv"), "trajectory", 8, &[(0, [0.0, 0.2, 0.6]), (1, [0.0, 0.1, 0.7])]);
    let (o, out) = report(dir.path(), CHECKS);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    let checks = read_json(&out.join("checks.json"));
    assert!(checks.as_array().unwrap().iter().any(|c| c["pass"] == false));
}

#[test]
fn report_on_single_seed_leaves_standard_errors_empty() {
    let dir = tempdir().unwrap();
    write_curve(&dir.path().join("a.csv"), "step", 8, &[(0, [0.0, 0.3, 0.5])]);
    write_curve(&dir.path().join("b.csv"), "trajectory", 8, &[(0, [0.0, 0.1, 0.8])]);
    let (o, out) = report(dir.path(), "");
    assert_eq!(code(&o), 0);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for row in summary.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[6], "", "{row}");
        assert_eq!(cells[9], "", "{row}");
    }
    assert!(!out.join("checks.json").exists());
    // Checks cannot pass without a standard error.
    let (o, _) = report(dir.path(), CHECKS);
    assert_eq!(code(&o), 1);
}

#[test]
fn report_rejects_a_repeated_seed() {
    let dir = tempdir().unwrap();
    write_curve(&dir.path().join("a.csv"), "step", 8, &[(0, [0.0, 0.3, 0.5])]);
    write_curve(&dir.path().join("b.csv"), "step", 8, &[(0, [0.0, 0.1, 0.8])]);
    let (o, _) = report(dir.path(), "");
    assert_eq!(code(&o), 2);
}

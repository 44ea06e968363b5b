//! The library used end to end through its public interface: parse,
//! annotate, roll out a group, score it.

use checklist_rl::advantage::{advantages, Granularity, NormalizerSpec};
use checklist_rl::checklist::{load_annotations, parse_checklist_documents, ChecklistDocument};
use checklist_rl::fixtures;
use checklist_rl::judge::JudgeSpec;
use checklist_rl::rollout::{run_group, Environment, ReferencePolicy, RolloutOptions, RolloutRecord, Termination};
use checklist_rl::toolsim::{build_replay_store, SimulatorSpec};
use checklist_rl::trajectory::{parse_dialogues, serialize_dialogue, ParseMode};

fn round_tripped() -> checklist_rl::checklist::AnnotatedDialogue {
    let a = fixtures::two_turn();
    let dialogues = parse_dialogues(&serialize_dialogue(&a.dialogue), ParseMode::Strict).unwrap();
    let docs: String = a
        .checklists
        .values()
        .map(|cl| {
            let doc = ChecklistDocument {
                dialogue_id: a.dialogue.id.clone(),
                turn: cl.turn_index,
                items: cl.items.clone(),
            };
            serde_json::to_string(&doc).unwrap() + "\n"
        })
        .collect();
    let mut annotated = load_annotations(dialogues, parse_checklist_documents(&docs).unwrap()).unwrap();
    assert_eq!(annotated.len(), 1);
    let got = annotated.remove(0);
    assert_eq!(got.dialogue, a.dialogue);
    got
}

fn group(judge: &JudgeSpec, seed: u64) -> (checklist_rl::advantage::GroupRewards, Vec<RolloutRecord>) {
    let a = round_tripped();
    let store = build_replay_store(&a.dialogue);
    let env = Environment {
        annotated: &a,
        judge,
        store: &store,
        sim: &SimulatorSpec::Echo,
    };
    let policy = ReferencePolicy { reference: &a.dialogue };
    run_group(env, &policy, &RolloutOptions::default(), "g", 6, seed).unwrap()
}

#[test]
fn clean_reference_group_is_perfect_and_flat() {
    let (g, records) = group(&fixtures::clean_judge("f3-2"), 0);
    assert!(records.iter().all(|r| r.termination == Termination::Completed));
    assert!(g.trajectory().iter().all(|r| *r == 1.0));
    for gran in Granularity::ALL {
        let t = advantages(&g, gran, NormalizerSpec::constant()).unwrap();
        assert!(t.values.values().all(|v| *v == 0.0), "{gran:?}");
    }
}

#[test]
fn noisy_group_is_reproducible_and_mean_zero() {
    let judge = JudgeSpec::noisy(fixtures::clean_judge("f3-2"), 0.25, 9).unwrap();
    let (g, records) = group(&judge, 40);
    let (g2, records2) = group(&judge, 40);
    assert_eq!(g, g2);
    let lines: Vec<String> = records.iter().map(RolloutRecord::to_json_line).collect();
    let lines2: Vec<String> = records2.iter().map(RolloutRecord::to_json_line).collect();
    assert_eq!(lines, lines2);
    for line in &lines {
        assert_eq!(RolloutRecord::from_json_line(line).unwrap().to_json_line(), *line);
    }
    let rs = g.trajectory();
    assert!(rs.iter().all(|r| (0.0..=1.0).contains(r)));
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    let t = advantages(&g, Granularity::Trajectory, NormalizerSpec::constant()).unwrap();
    for (&(i, _, _), v) in &t.values {
        assert!((v - (rs[i] - mean)).abs() < 1e-12);
    }
}

//! Brute-force recomputation of rewards and advantages, used to check the
//! production path on small instances.
//!
//! Everything here starts again from the latched traces and follows the
//! definitions with plain nested loops; no grid or reward stored in the
//! group is read.

use std::collections::BTreeMap;

use rand::Rng;

use super::{AdvantageError, AdvantageTable, Granularity, GroupRewards, NormalizerKind, NormalizerSpec, RolloutRewards};
use crate::checklist::{Checklist, ChecklistItem};
use crate::reward::{SatisfactionTrace, TurnDenominator};

pub const MAX_GROUP: usize = 8;
pub const MAX_TURNS: usize = 4;
pub const MAX_STEPS: usize = 6;
pub const MAX_ITEMS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTurn {
    pub flip: BTreeMap<String, Vec<bool>>,
    pub backfill: BTreeMap<String, Vec<bool>>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRollout {
    pub turns: BTreeMap<u32, OracleTurn>,
    pub trajectory: f64,
}

fn check_size(group: &GroupRewards) -> Result<(), AdvantageError> {
    let too_large = |what: String| Err(AdvantageError::InstanceTooLarge(what));
    if group.rollouts.len() > MAX_GROUP {
        return too_large(format!("{} rollouts", group.rollouts.len()));
    }
    if group.checklists.len() > MAX_TURNS {
        return too_large(format!("{} turns", group.checklists.len()));
    }
    for cl in group.checklists.values() {
        if cl.items.len() > MAX_ITEMS {
            return too_large(format!("{} items in turn {}", cl.items.len(), cl.turn_index));
        }
    }
    for r in &group.rollouts {
        for (t, tr) in &r.turns {
            if tr.trace.steps() > MAX_STEPS {
                return too_large(format!("{} steps in turn {t}", tr.trace.steps()));
            }
        }
    }
    Ok(())
}

fn sat(trace: &SatisfactionTrace, item: &str, k: usize) -> bool {
    trace.item_states[item][k]
}

fn deps_ok(trace: &SatisfactionTrace, item: &ChecklistItem, k: usize) -> bool {
    let mut ok = true;
    for d in &item.dependencies {
        if !sat(trace, d, k) {
            ok = false;
        }
    }
    ok
}

fn oracle_turn(trace: &SatisfactionTrace, cl: &Checklist) -> OracleTurn {
    let steps = trace.steps();
    let mut flip = BTreeMap::new();
    let mut backfill = BTreeMap::new();
    let mut reward = 0.0;
    for item in &cl.items {
        let mut f = Vec::new();
        let mut b = Vec::new();
        for s in 1..=steps {
            let open = deps_ok(trace, item, s - 1) && !sat(trace, &item.id, s - 1);
            f.push(open && sat(trace, &item.id, s));
            let mut later = false;
            for u in s..=steps {
                if sat(trace, &item.id, u) {
                    later = true;
                }
            }
            b.push(open && later);
        }
        for x in &f {
            if *x {
                reward += item.weight;
            }
        }
        flip.insert(item.id.clone(), f);
        backfill.insert(item.id.clone(), b);
    }
    OracleTurn {
        flip,
        backfill,
        reward,
    }
}

pub fn brute_force_rewards(group: &GroupRewards) -> Result<Vec<OracleRollout>, AdvantageError> {
    check_size(group)?;
    let mut out = Vec::new();
    for r in &group.rollouts {
        let mut turns = BTreeMap::new();
        let mut total = 0.0;
        for (t, tr) in &r.turns {
            let cl = group
                .checklists
                .get(t)
                .ok_or(AdvantageError::MissingChecklist(*t))?;
            let ot = oracle_turn(&tr.trace, cl);
            total += ot.reward;
            turns.insert(*t, ot);
        }
        out.push(OracleRollout {
            turns,
            trajectory: total / r.summary.denominator_turns as f64,
        });
    }
    Ok(out)
}

fn denominator(values: &[f64], spec: NormalizerSpec) -> f64 {
    if spec.kind == NormalizerKind::Constant1 {
        return 1.0;
    }
    let mut mean = 0.0;
    for v in values {
        mean += v;
    }
    mean /= values.len() as f64;
    let mut var = 0.0;
    for v in values {
        var += (v - mean) * (v - mean);
    }
    (var / values.len() as f64).sqrt() + spec.epsilon
}

fn mean(values: &[f64]) -> f64 {
    let mut m = 0.0;
    for v in values {
        m += v;
    }
    m / values.len() as f64
}

pub fn brute_force_advantages(
    group: &GroupRewards,
    granularity: Granularity,
    spec: NormalizerSpec,
) -> Result<AdvantageTable, AdvantageError> {
    let g = group.rollouts.len();
    if g < 2 {
        return Err(AdvantageError::GroupTooSmall(g));
    }
    let rewards = brute_force_rewards(group)?;
    let mut table = AdvantageTable::new(granularity);
    let steps_of = |i: usize, t: u32| group.rollouts[i].turns.get(&t).map(|tr| tr.trace.steps());
    match granularity {
        Granularity::Trajectory => {
            let rs: Vec<f64> = rewards.iter().map(|r| r.trajectory).collect();
            let (m, f) = (mean(&rs), denominator(&rs, spec));
            for i in 0..g {
                for &t in group.rollouts[i].turns.keys() {
                    for s in 1..=steps_of(i, t).unwrap() {
                        table.values.insert((i, t, s as u32), (rs[i] - m) / f);
                    }
                }
            }
        }
        Granularity::Turn => {
            for &t in group.checklists.keys() {
                let mut who = Vec::new();
                let mut rs = Vec::new();
                for (i, r) in rewards.iter().enumerate() {
                    if let Some(ot) = r.turns.get(&t) {
                        who.push(i);
                        rs.push(ot.reward);
                    }
                }
                if who.is_empty() {
                    continue;
                }
                let (m, f) = (mean(&rs), denominator(&rs, spec));
                for (k, &i) in who.iter().enumerate() {
                    let a = if who.len() < 2 { 0.0 } else { (rs[k] - m) / f };
                    for s in 1..=steps_of(i, t).unwrap() {
                        table.values.insert((i, t, s as u32), a);
                    }
                }
            }
        }
        Granularity::Step => {
            for (&t, cl) in &group.checklists {
                for i in 0..g {
                    let Some(steps) = steps_of(i, t) else { continue };
                    let trace = &group.rollouts[i].turns[&t].trace;
                    let mine = &rewards[i].turns[&t];
                    for s in 1..=steps {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for item in &cl.items {
                            let eligible = deps_ok(trace, item, s - 1) && !sat(trace, &item.id, s - 1);
                            if !eligible {
                                continue;
                            }
                            let mut ind = Vec::new();
                            for r in &rewards {
                                let hit = r
                                    .turns
                                    .get(&t)
                                    .is_some_and(|ot| ot.flip[&item.id].iter().any(|x| *x));
                                ind.push(if hit { 1.0 } else { 0.0 });
                            }
                            let r_tilde = if mine.backfill[&item.id][s - 1] { 1.0 } else { 0.0 };
                            num += item.weight * (r_tilde - mean(&ind)) / denominator(&ind, spec);
                            den += item.weight;
                        }
                        let a = if den > 0.0 { num / den } else { 0.0 };
                        table.values.insert((i, t, s as u32), a);
                    }
                }
            }
        }
    }
    Ok(table)
}

/// Random checklist with acyclic dependencies and weights summing to 1.
pub fn random_checklist<R: Rng>(rng: &mut R, turn: u32, items: usize) -> Checklist {
    let raw: Vec<f64> = (0..items).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let items = (0..items)
        .map(|i| {
            let deps: Vec<String> = (0..i).filter(|_| rng.gen_bool(0.35)).map(|j| format!("c{j}")).collect();
            let mut item = ChecklistItem::new(format!("c{i}"), "q", raw[i] / total).depends_on(deps);
            item.required_for_next_turn = rng.gen_bool(0.2);
            item
        })
        .collect();
    Checklist::new(turn, items)
}

/// Latched trace from raw Bernoulli(`p`) labels.
pub fn random_trace<R: Rng>(rng: &mut R, cl: &Checklist, steps: usize, p: f64) -> SatisfactionTrace {
    let mut item_states = BTreeMap::new();
    for item in &cl.items {
        let mut row = vec![false];
        for _ in 0..steps {
            let next = *row.last().unwrap() || rng.gen_bool(p);
            row.push(next);
        }
        item_states.insert(item.id.clone(), row);
    }
    SatisfactionTrace {
        turn_index: cl.turn_index,
        item_states,
    }
}

/// A random group within the brute-force limits. Some rollouts stop
/// early and some duplicate an earlier rollout, so that coverage gaps
/// and ties both occur.
pub fn random_group<R: Rng>(rng: &mut R) -> GroupRewards {
    let g = rng.gen_range(2..=MAX_GROUP);
    let turns = rng.gen_range(1..=MAX_TURNS);
    let checklists: BTreeMap<u32, Checklist> = (1..=turns as u32)
        .map(|t| {
            let items = rng.gen_range(1..=MAX_ITEMS);
            (t, random_checklist(rng, t, items))
        })
        .collect();
    let denominator = if rng.gen_bool(0.5) {
        TurnDenominator::Reference
    } else {
        TurnDenominator::Realized
    };
    let mut rollouts: Vec<RolloutRewards> = Vec::with_capacity(g);
    for _ in 0..g {
        if !rollouts.is_empty() && rng.gen_bool(0.15) {
            let k = rng.gen_range(0..rollouts.len());
            rollouts.push(rollouts[k].clone());
            continue;
        }
        let reached = if rng.gen_bool(0.6) { turns } else { rng.gen_range(1..=turns) };
        let p = rng.gen_range(0.05..0.9);
        let traces = (1..=reached as u32)
            .map(|t| {
                let steps = rng.gen_range(0..=MAX_STEPS);
                random_trace(rng, &checklists[&t], steps, p)
            })
            .collect();
        rollouts.push(
            RolloutRewards::from_traces(&checklists, traces, turns, denominator)
                .expect("generated traces match their checklists"),
        );
    }
    GroupRewards {
        checklists,
        rollouts,
    }
}

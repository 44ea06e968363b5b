//! Desk-scale training loop: a tabular softmax agent on synthetic tool-use
//! tasks, trained with group-relative advantages at a chosen granularity.
//!
//! Training labels come from the (optionally noisy) scripted judge; the
//! validation reward is always judged cleanly.

mod policy;
mod task;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{
    entropy, softmax, state_key, surrogate, surrogate_gradient, Sample, SoftmaxPolicy, StateKey,
    ToyAgent,
};
pub use task::{generate_task, ActionTemplate, TaskParams, ToyTask, MAX_ARG_VALUES};

use crate::advantage::{advantages, AdvantageError, AdvantageTable, Granularity, NormalizerSpec};
use crate::judge::{JudgeError, JudgeSpec};
use crate::reward::TurnDenominator;
use crate::rollout::{run_group, run_rollout, Environment, RolloutBudget, RolloutOptions, RolloutRecord};
use crate::toolsim::SimulatorSpec;
use crate::trajectory::{PrefixOptions, StepKind};

/// Base of the rollout seeds used for validation; training seeds are
/// drawn from a per-run stream and practically never collide with it.
pub const VALIDATION_SEED_BASE: u64 = 1 << 62;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("advantage table does not fit the records: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub granularity: Granularity,
    pub group_size: usize,
    pub learning_rate: f64,
    pub updates: usize,
    /// Label-flip probability of the training judge.
    pub judge_noise: f64,
    pub normalizer: NormalizerSpec,
    pub seeds: Vec<u64>,
    pub entropy_bonus: f64,
    pub temperature: f64,
    pub eval_every: usize,
    pub validation_rollouts: usize,
    pub budget: RolloutBudget,
    pub denominator: TurnDenominator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Trajectory,
            group_size: 8,
            learning_rate: 0.1,
            updates: 300,
            judge_noise: 0.0,
            normalizer: NormalizerSpec::constant(),
            seeds: (0..5).collect(),
            entropy_bonus: 0.01,
            temperature: 1.0,
            eval_every: 10,
            validation_rollouts: 32,
            budget: RolloutBudget {
                max_turns: 30,
                max_steps_per_turn: 6,
                max_total_steps: 32,
            },
            denominator: TurnDenominator::Reference,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::InvalidConfig(m.to_owned()));
        if self.group_size < 2 {
            return bad("group size must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.entropy_bonus < 0.0 {
            return bad("entropy bonus must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.judge_noise) {
            return bad("judge noise must lie in [0, 1]");
        }
        if self.eval_every == 0 || self.validation_rollouts == 0 {
            return bad("eval_every and validation_rollouts must be positive");
        }
        Ok(())
    }

    fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            budget: self.budget,
            judge_retries: 0,
            denominator: self.denominator,
        }
    }
}

/// Taken actions of a group with the advantages of their spans.
pub fn collect_samples(
    task: &ToyTask,
    records: &[RolloutRecord],
    table: &AdvantageTable,
) -> Result<Vec<Sample>, ToyError> {
    let mut samples = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        for turn in &rec.dialogue.turns {
            let mut s = 0;
            for (pos, step) in turn.steps.iter().enumerate() {
                if step.kind() != StepKind::AgentAction {
                    continue;
                }
                s += 1;
                let prefix = rec
                    .dialogue
                    .history_prefix(turn.index, pos as u32, PrefixOptions::default())
                    .map_err(|e| ToyError::ShapeMismatch(e.to_string()))?;
                let action = task.template_of(step).ok_or_else(|| {
                    ToyError::ShapeMismatch(format!("action outside the template set in turn {}", turn.index))
                })?;
                let advantage = table.get(i, turn.index, s).ok_or_else(|| {
                    ToyError::ShapeMismatch(format!("no advantage for span ({i}, {}, {s})", turn.index))
                })?;
                samples.push(Sample {
                    state: state_key(task, &prefix),
                    action,
                    advantage,
                });
            }
        }
    }
    Ok(samples)
}

/// One gradient-ascent step on the surrogate objective, averaged over the
/// group.
pub fn policy_gradient_update(
    policy: &SoftmaxPolicy,
    task: &ToyTask,
    records: &[RolloutRecord],
    table: &AdvantageTable,
    cfg: &TrainConfig,
) -> Result<SoftmaxPolicy, ToyError> {
    if table.granularity != cfg.granularity {
        return Err(ToyError::ShapeMismatch(format!(
            "{} table for a {} run",
            table.granularity.name(),
            cfg.granularity.name()
        )));
    }
    if policy.actions != task.templates.len() {
        return Err(ToyError::ShapeMismatch(format!(
            "policy has {} actions, task has {}",
            policy.actions,
            task.templates.len()
        )));
    }
    let samples = collect_samples(task, records, table)?;
    let grad = surrogate_gradient(policy, &samples, cfg.entropy_bonus, records.len() as f64);
    let mut next = policy.clone();
    for (key, g) in grad {
        let logits = next.logits.entry(key).or_insert_with(|| vec![0.0; policy.actions]);
        for (z, dz) in logits.iter_mut().zip(g) {
            *z += cfg.learning_rate * dz;
        }
    }
    Ok(next)
}

/// Mean trajectory reward over the validation seeds, judged without noise.
pub fn evaluate(policy: &SoftmaxPolicy, task: &ToyTask, cfg: &TrainConfig) -> f64 {
    let judge = JudgeSpec::scripted(task.judge.clone());
    let env = Environment {
        annotated: &task.annotated,
        judge: &judge,
        store: &task.store,
        sim: &SimulatorSpec::Echo,
    };
    let agent = ToyAgent { policy, task };
    let options = cfg.rollout_options();
    let total: f64 = (0..cfg.validation_rollouts)
        .into_par_iter()
        .map(|k| {
            run_rollout(env, &agent, &options, "validation", k, VALIDATION_SEED_BASE + k as u64)
                .summary
                .trajectory
        })
        .sum();
    total / cfg.validation_rollouts as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub granularity: Granularity,
    pub group_size: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// `(update, mean validation R)`.
    pub points: Vec<(usize, f64)>,
}

impl LearningCurve {
    pub fn at(&self, update: usize) -> Option<f64> {
        self.points.iter().find(|(u, _)| *u == update).map(|(_, r)| *r)
    }

    pub fn last(&self) -> Option<(usize, f64)> {
        self.points.last().copied()
    }
}

pub const CURVE_HEADER: [&str; 6] = ["update", "seed", "granularity", "G", "epsilon", "mean_R"];

/// Writes curves as `update,seed,granularity,G,epsilon,mean_R` rows.
pub fn write_curves<W: Write>(curves: &[LearningCurve], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for c in curves {
        for (u, r) in &c.points {
            w.write_record([
                u.to_string(),
                c.seed.to_string(),
                c.granularity.name().to_owned(),
                c.group_size.to_string(),
                c.epsilon.to_string(),
                r.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    update: usize,
    seed: u64,
    granularity: String,
    #[serde(rename = "G")]
    group_size: usize,
    epsilon: f64,
    #[serde(rename = "mean_R")]
    mean_r: f64,
}

/// Reads curves written by [`write_curves`]; rows of one (granularity, G,
/// epsilon, seed) setting form one curve.
pub fn read_curves<R: std::io::Read>(input: R) -> Result<Vec<LearningCurve>, String> {
    let mut curves: Vec<LearningCurve> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<CurveRow>() {
        let row = row.map_err(|e| e.to_string())?;
        let granularity: Granularity = row.granularity.parse()?;
        if !row.mean_r.is_finite() {
            return Err(format!("non-finite reward at update {}", row.update));
        }
        let same = |c: &LearningCurve| {
            c.granularity == granularity
                && c.group_size == row.group_size
                && c.epsilon == row.epsilon
                && c.seed == row.seed
        };
        match curves.iter_mut().find(|c| same(c)) {
            Some(c) => c.points.push((row.update, row.mean_r)),
            None => curves.push(LearningCurve {
                granularity,
                group_size: row.group_size,
                epsilon: row.epsilon,
                seed: row.seed,
                points: vec![(row.update, row.mean_r)],
            }),
        }
    }
    Ok(curves)
}

/// Trains one policy from scratch and records its validation curve.
pub fn train_seed(cfg: &TrainConfig, task: &ToyTask, seed: u64) -> Result<LearningCurve, ToyError> {
    cfg.validate()?;
    let clean = JudgeSpec::scripted(task.judge.clone());
    let options = cfg.rollout_options();
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = SoftmaxPolicy::new(task.templates.len(), cfg.temperature);
    let mut points = Vec::new();
    for u in 0..=cfg.updates {
        if u % cfg.eval_every == 0 || u == cfg.updates {
            points.push((u, evaluate(&policy, task, cfg)));
        }
        if u == cfg.updates {
            break;
        }
        let (noise_seed, group_seed): (u64, u64) = (stream.gen(), stream.gen());
        let judge = JudgeSpec::noisy(clean.clone(), cfg.judge_noise, noise_seed)?;
        let env = Environment {
            annotated: &task.annotated,
            judge: &judge,
            store: &task.store,
            sim: &SimulatorSpec::Echo,
        };
        let agent = ToyAgent { policy: &policy, task };
        let group_id = format!("u{u}");
        let (group, records) = run_group(env, &agent, &options, &group_id, cfg.group_size, group_seed)?;
        let table = advantages(&group, cfg.granularity, cfg.normalizer)?;
        policy = policy_gradient_update(&policy, task, &records, &table, cfg)?;
    }
    Ok(LearningCurve {
        granularity: cfg.granularity,
        group_size: cfg.group_size,
        epsilon: cfg.judge_noise,
        seed,
        points,
    })
}

/// One curve per configured seed.
pub fn train(cfg: &TrainConfig, task: &ToyTask) -> Result<Vec<LearningCurve>, ToyError> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, task, seed))
        .collect()
}

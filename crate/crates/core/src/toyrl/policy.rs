//! Tabular softmax policy over (turn, satisfied-item set) states.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::ToyTask;
use crate::rollout::{Policy, PolicyError};
use crate::trajectory::{HistoryPrefix, Step};

/// Turn index and bitmask of the turn's items that hold on the prefix,
/// bit `k` for the `k`-th checklist item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub turn: u32,
    pub satisfied: u32,
}

/// State of the prefix under the task's clean predicates.
pub fn state_key(task: &ToyTask, prefix: &HistoryPrefix) -> StateKey {
    let turn = prefix.current_turn();
    let cl = task
        .annotated
        .checklist(turn)
        .expect("toy prefixes stay within the task");
    let mut satisfied = 0;
    for (k, id) in cl.ids().enumerate() {
        if task.judge.label(prefix, id).unwrap_or(false) {
            satisfied |= 1 << k;
        }
    }
    StateKey { turn, satisfied }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub actions: usize,
    pub temperature: f64,
    /// Logits of visited states; unvisited states have all-zero logits.
    pub logits: BTreeMap<StateKey, Vec<f64>>,
}

impl SoftmaxPolicy {
    pub fn new(actions: usize, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            actions,
            temperature,
            logits: BTreeMap::new(),
        }
    }

    pub fn logits(&self, key: &StateKey) -> Vec<f64> {
        self.logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.actions])
    }

    pub fn probs(&self, key: &StateKey) -> Vec<f64> {
        softmax(&self.logits(key), self.temperature)
    }

    pub fn sample<R: Rng>(&self, key: &StateKey, rng: &mut R) -> usize {
        let p = self.probs(key);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        p.len() - 1
    }

    pub fn entropy(&self, key: &StateKey) -> f64 {
        entropy(&self.probs(key))
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// One taken action with the advantage of the span it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub state: StateKey,
    pub action: usize,
    pub advantage: f64,
}

/// Surrogate objective whose gradient is the update direction:
/// `Σ [A·log π(a|k) + β·H(π(·|k))] / scale` over the samples.
pub fn surrogate(policy: &SoftmaxPolicy, samples: &[Sample], entropy_bonus: f64, scale: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let p = policy.probs(&s.state);
            s.advantage * p[s.action].ln() + entropy_bonus * entropy(&p)
        })
        .sum::<f64>()
        / scale
}

/// Analytic gradient of [`surrogate`] with respect to every touched logit.
pub fn surrogate_gradient(
    policy: &SoftmaxPolicy,
    samples: &[Sample],
    entropy_bonus: f64,
    scale: f64,
) -> BTreeMap<StateKey, Vec<f64>> {
    let t = policy.temperature;
    let mut grad: BTreeMap<StateKey, Vec<f64>> = BTreeMap::new();
    for s in samples {
        let p = policy.probs(&s.state);
        let h = entropy(&p);
        let g = grad
            .entry(s.state)
            .or_insert_with(|| vec![0.0; policy.actions]);
        for (j, pj) in p.iter().enumerate() {
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            let dlogp = (onehot - pj) / t;
            let dh = if *pj > 0.0 { -pj * (pj.ln() + h) / t } else { 0.0 };
            g[j] += (s.advantage * dlogp + entropy_bonus * dh) / scale;
        }
    }
    grad
}

/// The policy acting in a toy task.
pub struct ToyAgent<'a> {
    pub policy: &'a SoftmaxPolicy,
    pub task: &'a ToyTask,
}

impl Policy for ToyAgent<'_> {
    fn act(&self, prefix: &HistoryPrefix, rng: &mut ChaCha8Rng) -> Result<Step, PolicyError> {
        let key = state_key(self.task, prefix);
        let a = self.policy.sample(&key, rng);
        Ok(self.task.templates[a].to_step())
    }
}

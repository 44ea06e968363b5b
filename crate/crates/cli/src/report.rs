//! Seed statistics of learning curves, pairwise comparisons and the
//! ordering checks that gate a run.

use std::io::Write;

use checklist_rl::advantage::Granularity;
use checklist_rl::toyrl::LearningCurve;
use serde::{Deserialize, Serialize};

/// One training setting; curves of different seeds share it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub granularity: Granularity,
    pub group_size: usize,
    pub epsilon: f64,
}

impl Setting {
    pub fn of(c: &LearningCurve) -> Self {
        Setting {
            granularity: c.granularity,
            group_size: c.group_size,
            epsilon: c.epsilon,
        }
    }

    fn sort_key(&self) -> (Granularity, usize, u64) {
        (self.granularity, self.group_size, self.epsilon.to_bits())
    }

    pub fn label(&self) -> String {
        format!("{}/G{}/eps{}", self.granularity.name(), self.group_size, self.epsilon)
    }
}

/// Mean and seed standard error of one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub update: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by `sqrt(n)`; absent
    /// with fewer than two seeds.
    pub se: Option<f64>,
}

impl Estimate {
    pub fn of(update: usize, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.len() >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Estimate { update, mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub seeds: usize,
    /// Seed-averaged curve over the updates every seed evaluated.
    pub curve: Vec<Estimate>,
    pub early: Estimate,
    pub final_: Estimate,
}

/// Groups curves by setting and averages over seeds. `early_fraction`
/// picks the evaluated update nearest to that fraction of the last one.
pub fn summarize(curves: &[LearningCurve], early_fraction: f64) -> Result<Vec<SettingSummary>, String> {
    let mut groups: Vec<(Setting, Vec<&LearningCurve>)> = Vec::new();
    for c in curves {
        let s = Setting::of(c);
        match groups.iter_mut().find(|(g, _)| g.sort_key() == s.sort_key()) {
            Some((_, v)) => v.push(c),
            None => groups.push((s, vec![c])),
        }
    }
    groups.sort_by_key(|(s, _)| s.sort_key());
    groups
        .into_iter()
        .map(|(setting, members)| {
            let mut seeds: Vec<u64> = members.iter().map(|c| c.seed).collect();
            seeds.sort_unstable();
            if seeds.windows(2).any(|w| w[0] == w[1]) {
                return Err(format!("{} has a seed twice", setting.label()));
            }
            let updates: Vec<usize> = members[0]
                .points
                .iter()
                .map(|(u, _)| *u)
                .filter(|u| members.iter().all(|c| c.at(*u).is_some()))
                .collect();
            let Some(&last) = updates.last() else {
                return Err(format!("{} has no update shared by all seeds", setting.label()));
            };
            let curve: Vec<Estimate> = updates
                .iter()
                .map(|&u| {
                    let values: Vec<f64> = members.iter().filter_map(|c| c.at(u)).collect();
                    Estimate::of(u, &values)
                })
                .collect();
            let target = early_fraction * last as f64;
            let early = *curve
                .iter()
                .min_by(|a, b| {
                    let da = (a.update as f64 - target).abs();
                    let db = (b.update as f64 - target).abs();
                    da.total_cmp(&db).then(a.update.cmp(&b.update))
                })
                .expect("curve is non-empty");
            let final_ = *curve.last().expect("curve is non-empty");
            Ok(SettingSummary {
                setting,
                seeds: members.len(),
                curve,
                early,
                final_,
            })
        })
        .collect()
}

pub fn pooled_se(a: &Estimate, b: &Estimate) -> Option<f64> {
    Some((a.se?.powi(2) + b.se?.powi(2)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Final,
}

impl SettingSummary {
    pub fn at(&self, phase: Phase) -> &Estimate {
        match phase {
            Phase::Early => &self.early,
            Phase::Final => &self.final_,
        }
    }
}

/// `better` must exceed `worse` at `phase` by more than one pooled
/// standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub name: String,
    pub phase: Phase,
    pub better: Setting,
    pub worse: Setting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub margin: Option<f64>,
    pub pooled_se: Option<f64>,
    pub detail: String,
}

pub fn evaluate(check: &Check, summaries: &[SettingSummary]) -> CheckResult {
    let find = |s: &Setting| summaries.iter().find(|x| x.setting.sort_key() == s.sort_key());
    let fail = |detail: String| CheckResult {
        name: check.name.clone(),
        pass: false,
        margin: None,
        pooled_se: None,
        detail,
    };
    let (Some(b), Some(w)) = (find(&check.better), find(&check.worse)) else {
        return fail("setting missing from the curves".into());
    };
    let (eb, ew) = (b.at(check.phase), w.at(check.phase));
    let margin = eb.mean - ew.mean;
    let Some(se) = pooled_se(eb, ew) else {
        return CheckResult {
            margin: Some(margin),
            ..fail("standard error unavailable with a single seed".into())
        };
    };
    let pass = margin > se;
    CheckResult {
        name: check.name.clone(),
        pass,
        margin: Some(margin),
        pooled_se: Some(se),
        detail: format!(
            "{} {:.4} vs {} {:.4} at update {}",
            check.better.label(),
            eb.mean,
            check.worse.label(),
            ew.mean,
            eb.update
        ),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary<W: Write>(summaries: &[SettingSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "granularity",
        "G",
        "epsilon",
        "seeds",
        "early_update",
        "early_mean",
        "early_se",
        "final_update",
        "final_mean",
        "final_se",
    ])?;
    for s in summaries {
        w.write_record([
            s.setting.granularity.name().to_owned(),
            s.setting.group_size.to_string(),
            s.setting.epsilon.to_string(),
            s.seeds.to_string(),
            s.early.update.to_string(),
            s.early.mean.to_string(),
            opt(s.early.se),
            s.final_.update.to_string(),
            s.final_.mean.to_string(),
            opt(s.final_.se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Seed-averaged curves, one row per (setting, update), for plotting.
pub fn write_mean_curves<W: Write>(summaries: &[SettingSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["granularity", "G", "epsilon", "update", "mean_R", "se"])?;
    for s in summaries {
        for e in &s.curve {
            w.write_record([
                s.setting.granularity.name().to_owned(),
                s.setting.group_size.to_string(),
                s.setting.epsilon.to_string(),
                e.update.to_string(),
                e.mean.to_string(),
                opt(e.se),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// First shared update from which `a - b` keeps the sign it has at the
/// last update, when that sign differs from the first nonzero one.
pub fn crossover(a: &SettingSummary, b: &SettingSummary) -> Option<usize> {
    let diffs: Vec<(usize, f64)> = a
        .curve
        .iter()
        .filter_map(|ea| {
            let eb = b.curve.iter().find(|e| e.update == ea.update)?;
            Some((ea.update, ea.mean - eb.mean))
        })
        .collect();
    let first = diffs.iter().map(|(_, d)| *d).find(|d| *d != 0.0)?;
    let last = diffs.last()?.1;
    if last == 0.0 || first.signum() == last.signum() {
        return None;
    }
    let from = diffs.iter().rposition(|(_, d)| d.signum() != last.signum())? + 1;
    Some(diffs[from].0)
}

/// One row per pair of settings.
pub fn write_comparisons<W: Write>(summaries: &[SettingSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "a",
        "b",
        "early_diff",
        "early_pooled_se",
        "final_diff",
        "final_pooled_se",
        "crossover_update",
    ])?;
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            w.write_record([
                a.setting.label(),
                b.setting.label(),
                (a.early.mean - b.early.mean).to_string(),
                opt(pooled_se(&a.early, &b.early)),
                (a.final_.mean - b.final_.mean).to_string(),
                opt(pooled_se(&a.final_, &b.final_)),
                crossover(a, b).map(|u| u.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

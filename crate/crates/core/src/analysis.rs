//! Post-hoc analyses over run logs: rank correlation across fidelities,
//! schedule extraction and re-evaluation, return histograms and model NLL.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::confspace::{Configuration, ParamKind, ParamSpace};
use crate::dynamics::{GaussianEnsemble, TransitionDataset};
use crate::error::{AnalysisError, RunError, TrainError};
use crate::orchestrator::seed_tree;
use crate::runlog::{Record, RunLog, Schedule};
use crate::schedulers::MemberId;
use crate::trainable::Trainable;

/// Exact permutation p-values are used below this sample size.
const EXACT_P_BELOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub cor: f64,
    pub p: f64,
    pub n: usize,
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Visits every permutation of `v` (Heap's algorithm).
fn for_each_permutation(v: &mut [f64], mut f: impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Spearman rank correlation with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationReport, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let cor = pearson(&rx, &ry).ok_or(AnalysisError::ConstantInput)?;
    let p = if n < EXACT_P_BELOW {
        let mut perm = ry.clone();
        let (mut hits, mut total) = (0u64, 0u64);
        for_each_permutation(&mut perm, |p| {
            total += 1;
            if pearson(&rx, p).is_some_and(|c| c.abs() >= cor.abs() - 1e-12) {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else if cor.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = cor * (df / (1.0 - cor * cor)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(CorrelationReport { cor, p, n })
}

/// Spearman correlation between the scores configurations achieved at two
/// rung budgets, over the configurations evaluated at both.
pub fn cross_fidelity_correlation(
    log: &RunLog,
    low_budget: u64,
    high_budget: u64,
) -> Result<CorrelationReport, AnalysisError> {
    let mut low: BTreeMap<MemberId, f64> = BTreeMap::new();
    let mut high: BTreeMap<MemberId, f64> = BTreeMap::new();
    for r in log.rungs() {
        let Some(s) = r.score.filter(|s| s.is_finite()) else {
            continue;
        };
        if r.budget == low_budget {
            low.insert(r.member, s);
        }
        if r.budget == high_budget {
            high.insert(r.member, s);
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = low
        .iter()
        .filter_map(|(m, &l)| high.get(m).map(|&h| (l, h)))
        .unzip();
    if xs.len() < 2 {
        return Err(AnalysisError::InsufficientOverlap(xs.len()));
    }
    spearman(&xs, &ys)
}

/// Budgets at which rung results were logged, ascending.
pub fn rung_budgets(log: &RunLog) -> Vec<u64> {
    let mut b: Vec<u64> = log.rungs().map(|r| r.budget).collect();
    b.sort_unstable();
    b.dedup();
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    /// Follow the clone ancestry of the best final member.
    LineageBest,
    /// Per interval, average the configurations of the `k` best members.
    TopKMean(usize),
}

/// The configurations that actually produced `member`'s final state, one per
/// trial, following clone and backtrack sources.
fn lineage_of(log: &RunLog, member: MemberId) -> Result<Vec<(u64, Configuration)>, AnalysisError> {
    let mut lineage: HashMap<MemberId, Vec<(u64, Configuration)>> = HashMap::new();
    let mut frozen = HashMap::new();
    type Lineages = HashMap<MemberId, Vec<(u64, Configuration)>>;
    fn freeze(frozen: &mut HashMap<u64, Lineages>, step: u64, lineage: &Lineages) {
        frozen.entry(step).or_insert_with(|| lineage.clone());
    }
    for rec in &log.records {
        match rec {
            Record::Trial(t) => {
                let l = lineage.entry(t.member).or_default();
                l.retain(|(i, _)| *i < t.trial);
                l.push((t.trial, t.config.clone()));
            }
            Record::Directive(d) => {
                freeze(&mut frozen, d.step, &lineage);
                if let Some(src) = d.source {
                    let mut from = frozen
                        .get(&src.step)
                        .and_then(|m| m.get(&src.member))
                        .cloned()
                        .unwrap_or_default();
                    from.retain(|(i, _)| *i < d.trial);
                    lineage.insert(d.member, from);
                }
            }
            Record::Snapshot(s) => freeze(&mut frozen, s.step, &lineage),
            _ => {}
        }
    }
    lineage
        .remove(&member)
        .filter(|l| !l.is_empty())
        .ok_or(AnalysisError::EmptyLog)
}

/// Best member according to the summary, else the latest snapshot, else the
/// highest-scoring last trial.
pub fn best_member(log: &RunLog) -> Option<MemberId> {
    if let Some(s) = log.summary() {
        return Some(s.best_member);
    }
    let finite = |s: Option<f64>| s.filter(|v| v.is_finite()).unwrap_or(f64::NEG_INFINITY);
    if let Some(snap) = log.snapshots().last() {
        return snap
            .members
            .iter()
            .max_by(|a, b| finite(a.score).total_cmp(&finite(b.score)).then(b.member.cmp(&a.member)))
            .map(|m| m.member);
    }
    let mut last: BTreeMap<MemberId, Option<f64>> = BTreeMap::new();
    for t in log.trials() {
        last.insert(t.member, t.score);
    }
    last.iter()
        .max_by(|a, b| finite(*a.1).total_cmp(&finite(*b.1)).then(b.0.cmp(a.0)))
        .map(|(m, _)| *m)
}

/// Mean of member configurations: geometric for log-scaled parameters,
/// rounded for integers, arithmetic otherwise.
pub fn mean_config(configs: &[&Configuration], space: Option<&ParamSpace>) -> Configuration {
    let mut out = Configuration::new();
    let Some(first) = configs.first() else {
        return out;
    };
    let n = configs.len() as f64;
    for (name, _) in first.iter() {
        let values: Vec<f64> = configs.iter().filter_map(|c| c.get(name)).collect();
        let spec = space.and_then(|s| s.spec(name));
        let log_scaled = spec.is_some_and(|s| s.log_scale);
        let mut v = if log_scaled {
            (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
        } else {
            values.iter().sum::<f64>() / n
        };
        if let Some(s) = spec {
            if s.kind == ParamKind::Integer {
                v = v.round();
            }
            v = v.clamp(s.lower, s.upper);
        }
        out.set(name, v);
    }
    out
}

/// Schedule that reproduces `member`'s ancestry.
pub fn lineage_schedule(log: &RunLog, member: MemberId) -> Result<Schedule, AnalysisError> {
    let lineage = lineage_of(log, member)?;
    let mut s = Schedule::from_per_trial(lineage.iter().map(|(t, c)| (*t, c)));
    if let Some(e) = s.entries.first_mut() {
        e.trial = 0;
    }
    Ok(s)
}

pub fn extract_schedule(
    log: &RunLog,
    mode: ExtractMode,
    space: Option<&ParamSpace>,
) -> Result<Schedule, AnalysisError> {
    match mode {
        ExtractMode::LineageBest => {
            let best = best_member(log).ok_or(AnalysisError::EmptyLog)?;
            lineage_schedule(log, best)
        }
        ExtractMode::TopKMean(k) => {
            // Per step: each member's configuration during the step and its
            // score at the end of the step.
            let mut steps: BTreeMap<u64, BTreeMap<MemberId, (u64, f64, Configuration)>> = BTreeMap::new();
            for t in log.trials() {
                let score = t.score.filter(|s| s.is_finite()).unwrap_or(f64::NEG_INFINITY);
                let e = steps
                    .entry(t.step)
                    .or_default()
                    .entry(t.member)
                    .or_insert((t.trial, score, t.config.clone()));
                e.0 = e.0.min(t.trial);
                e.1 = score;
            }
            if steps.is_empty() {
                return Err(AnalysisError::EmptyLog);
            }
            let mut per_step = Vec::new();
            for members in steps.values() {
                let mut ranked: Vec<(&MemberId, &(u64, f64, Configuration))> = members.iter().collect();
                ranked.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then(a.0.cmp(b.0)));
                ranked.truncate(k.max(1));
                let first_trial = ranked.iter().map(|(_, e)| e.0).min().unwrap_or(0);
                let configs: Vec<&Configuration> = ranked.iter().map(|(_, e)| &e.2).collect();
                per_step.push((first_trial, mean_config(&configs, space)));
            }
            let mut s = Schedule::from_per_trial(per_step.iter().map(|(t, c)| (*t, c)));
            if let Some(e) = s.entries.first_mut() {
                e.trial = 0;
            }
            Ok(s)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CurveReading {
    /// Running maximum over trials of the cross-seed mean return.
    #[default]
    RunningMaxOfMean,
    /// Cross-seed mean of each seed's running maximum.
    MeanOfRunningMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    /// `returns[seed][trial]`.
    pub returns: Vec<Vec<f64>>,
    pub mean_returns: Vec<f64>,
    pub curve: Vec<f64>,
}

/// Replays `schedule` on fresh trainables for `n_seeds` seeds (concurrently)
/// and summarizes the returns.
///
/// Trial `t` of seed `s` uses seed `seed_tree(s, 0, t)`. A seed that fails
/// keeps contributing its last finite return.
pub fn evaluate_schedule<F>(
    schedule: &Schedule,
    n_trials: u64,
    n_seeds: u64,
    reading: CurveReading,
    factory: F,
) -> Result<EvalCurve, AnalysisError>
where
    F: Fn(u64) -> Result<Box<dyn Trainable>, TrainError> + Sync,
{
    if !schedule.is_valid() {
        return Err(AnalysisError::EmptyLog);
    }
    let returns: Vec<Vec<f64>> = (0..n_seeds)
        .into_par_iter()
        .map(|seed| -> Result<Vec<f64>, AnalysisError> {
            let mut t = factory(seed)?;
            let mut rets = Vec::with_capacity(n_trials as usize);
            for trial in 0..n_trials {
                match t.step(schedule.config_at(trial), seed_tree(seed, 0, trial)) {
                    Ok(r) => rets.push(r),
                    Err(e) => match rets.last().copied() {
                        Some(last) => {
                            log::warn!("seed {seed} failed at trial {trial}: {e}");
                            rets.resize(n_trials as usize, last);
                            break;
                        }
                        None => return Err(e.into()),
                    },
                }
            }
            Ok(rets)
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize_returns(returns, reading))
}

pub fn summarize_returns(returns: Vec<Vec<f64>>, reading: CurveReading) -> EvalCurve {
    let n_trials = returns.iter().map(Vec::len).min().unwrap_or(0);
    let n = returns.len() as f64;
    let mean_returns: Vec<f64> = (0..n_trials)
        .map(|t| returns.iter().map(|r| r[t]).sum::<f64>() / n)
        .collect();
    let running_max = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .scan(f64::NEG_INFINITY, |m, &x| {
                *m = m.max(x);
                Some(*m)
            })
            .collect()
    };
    let curve = match reading {
        CurveReading::RunningMaxOfMean => running_max(&mean_returns),
        CurveReading::MeanOfRunningMax => {
            let maxes: Vec<Vec<f64>> = returns.iter().map(|r| running_max(&r[..n_trials])).collect();
            (0..n_trials)
                .map(|t| maxes.iter().map(|m| m[t]).sum::<f64>() / n)
                .collect()
        }
    };
    EvalCurve {
        returns,
        mean_returns,
        curve,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; a single bin when every value is equal.
    pub edges: Vec<f64>,
    pub counts: BTreeMap<String, Vec<u64>>,
}

pub const DEFAULT_HIST_BINS: usize = 20;

/// Fixed-width histogram over the pooled range of every group's values.
pub fn histogram(groups: &[(String, Vec<f64>)], bins: usize) -> Histogram {
    let all: Vec<f64> = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = if all.is_empty() || lo == hi { 1 } else { bins.max(1) };
    let (lo, hi) = if all.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = BTreeMap::new();
    for (name, values) in groups {
        let c: &mut Vec<u64> = counts.entry(name.clone()).or_insert_with(|| vec![0; bins]);
        for &v in values.iter().filter(|v| v.is_finite()) {
            let i = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            c[i] += 1;
        }
    }
    Histogram { edges, counts }
}

/// Final score of every member in the log's last snapshot.
pub fn final_scores(log: &RunLog) -> Vec<f64> {
    log.snapshots()
        .last()
        .map(|s| s.members.iter().filter_map(|m| m.score).collect())
        .unwrap_or_default()
}

/// The best final score of each run, grouped by scheduler.
pub fn final_return_histogram(logs: &[RunLog], bins: usize) -> Histogram {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for log in logs {
        let best = log
            .summary()
            .and_then(|s| s.best_score)
            .or_else(|| final_scores(log).into_iter().reduce(f64::max));
        if let Some(b) = best {
            groups.entry(log.header.scheduler.clone()).or_default().push(b);
        }
    }
    histogram(&groups.into_iter().collect::<Vec<_>>(), bins)
}

pub const DEFAULT_NLL_WINDOW: usize = 20;

pub enum NllData<'a> {
    /// The learner's own data; only the last `window` trials are used.
    OnPolicy {
        dataset: &'a TransitionDataset,
        window: usize,
    },
    /// An independently collected dataset, used whole.
    External(&'a TransitionDataset),
}

/// Mean one-step NLL of `model`, averaged over transitions and members.
pub fn model_nll_eval(model: &GaussianEnsemble, data: NllData<'_>) -> Result<f64, AnalysisError> {
    let windowed;
    let d = match data {
        NllData::OnPolicy { dataset, window } => {
            windowed = dataset.last_trials(window);
            &windowed
        }
        NllData::External(d) => d,
    };
    if d.is_empty() {
        return Err(AnalysisError::EmptyWindow);
    }
    Ok(model.mean_nll(d)?)
}

fn write_csv(path: &Path, header: &[String], rows: Vec<Vec<String>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Log(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| RunError::Log(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| RunError::io(path, e))
}

/// `trial,mean_return,curve,seed_0,...`
pub fn write_curve_csv(path: &Path, curve: &EvalCurve) -> Result<(), RunError> {
    let mut head = vec!["trial".to_string(), "mean_return".into(), "curve".into()];
    head.extend((0..curve.returns.len()).map(|s| format!("seed_{s}")));
    let rows = (0..curve.mean_returns.len())
        .map(|t| {
            let mut r = vec![t.to_string(), curve.mean_returns[t].to_string(), curve.curve[t].to_string()];
            r.extend(curve.returns.iter().map(|s| s[t].to_string()));
            r
        })
        .collect();
    write_csv(path, &head, rows)
}

/// `group,bin_low,bin_high,count`
pub fn write_hist_csv(path: &Path, hist: &Histogram) -> Result<(), RunError> {
    let head: Vec<String> = ["group", "bin_low", "bin_high", "count"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (name, counts) in &hist.counts {
        for (i, c) in counts.iter().enumerate() {
            rows.push(vec![
                name.clone(),
                hist.edges[i].to_string(),
                hist.edges[i + 1].to_string(),
                c.to_string(),
            ]);
        }
    }
    write_csv(path, &head, rows)
}

/// `low_budget,high_budget,cor,p,n`
pub fn write_corr_csv(path: &Path, rows: &[(u64, u64, CorrelationReport)]) -> Result<(), RunError> {
    let head: Vec<String> = ["low_budget", "high_budget", "cor", "p", "n"].map(String::from).to_vec();
    let rows = rows
        .iter()
        .map(|(l, h, r)| vec![l.to_string(), h.to_string(), r.cor.to_string(), r.p.to_string(), r.n.to_string()])
        .collect();
    write_csv(path, &head, rows)
}

pub fn write_schedule_csv(path: &Path, schedule: &Schedule) -> Result<(), RunError> {
    std::fs::write(path, schedule.to_csv()?).map_err(|e| RunError::io(path, e))
}

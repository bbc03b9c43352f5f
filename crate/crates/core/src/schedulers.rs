//! Tuners as pure decision procedures over member scores.
//!
//! Nothing here trains anything: each function maps a score snapshot (plus a
//! seed) to [`Directive`]s which the orchestrator executes. The same inputs
//! always produce the same directives.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confspace::{explore, perturb, sample, Configuration, ParamSpace};
use crate::error::SchedulerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(pub u32);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtOptions {
    pub population_size: usize,
    /// Fraction replaced at the bottom and used as donors at the top.
    pub truncation_quantile: f64,
    /// Trials between exploit/explore steps.
    pub interval: u64,
    pub p_perturb: f64,
    pub copy_history: bool,
}

impl Default for PbtOptions {
    fn default() -> Self {
        PbtOptions {
            population_size: 40,
            truncation_quantile: 0.2,
            interval: 5,
            p_perturb: 0.75,
            copy_history: true,
        }
    }
}

impl PbtOptions {
    /// Exploit interval for a task of the given episode length: 4 trials for
    /// short-horizon tasks, 5 otherwise.
    pub fn interval_for_horizon(episode_len: usize) -> u64 {
        if episode_len <= 200 {
            4
        } else {
            5
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::InvalidOptions(m.to_string()));
        if !(self.truncation_quantile > 0.0 && self.truncation_quantile <= 0.5) {
            return bad("truncation quantile must lie in (0, 0.5]");
        }
        if self.interval == 0 {
            return bad("interval must be at least 1");
        }
        if self.population_size < 2 {
            return bad("population needs at least two members");
        }
        if !(0.0..=1.0).contains(&self.p_perturb) {
            return bad("p_perturb must be a probability");
        }
        Ok(())
    }

    /// `floor(q * n)`.
    pub fn truncation_count(&self, n: usize) -> usize {
        (self.truncation_quantile * n as f64 + 1e-9).floor() as usize
    }
}

/// One member's state as seen by a scheduler. Failed members carry
/// `f64::NEG_INFINITY` (NaN is treated the same way).
#[derive(Debug, Clone, PartialEq)]
pub struct MemberScore {
    pub id: MemberId,
    pub score: f64,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Continue,
    CloneFrom { donor: MemberId, copy_history: bool },
    /// Restore the elite at this index of the archive returned alongside.
    Backtrack { elite: usize },
    Stop,
    Promote { budget: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Directive {
    pub member: MemberId,
    pub action: Action,
    pub new_config: Option<Configuration>,
}

impl Directive {
    pub fn continue_(member: MemberId) -> Self {
        Directive {
            member,
            action: Action::Continue,
            new_config: None,
        }
    }
}

fn sort_key(score: f64) -> f64 {
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

/// Member indices from best to worst; ties go to the lower member id.
pub fn rank_members(members: &[MemberScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        sort_key(members[b].score)
            .total_cmp(&sort_key(members[a].score))
            .then(members[a].id.cmp(&members[b].id))
    });
    order
}

/// Truncation selection: the bottom `floor(q N)` members clone a uniformly
/// chosen member of the top `floor(q N)` and explore from the donor's config.
/// Directives come back in input order.
pub fn pbt_step(
    members: &[MemberScore],
    opts: &PbtOptions,
    space: &ParamSpace,
    seed: u64,
) -> Result<Vec<Directive>, SchedulerError> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Directive> = members.iter().map(|m| Directive::continue_(m.id)).collect();
    let k = opts.truncation_count(members.len());
    if k == 0 {
        log::warn!(
            "{}",
            SchedulerError::PopulationTooSmall {
                population: members.len(),
                quantile: opts.truncation_quantile
            }
        );
        return Ok(out);
    }
    let order = rank_members(members);
    let top = &order[..k];
    let mut bottom = order[order.len() - k..].to_vec();
    bottom.sort_unstable();
    for receiver in bottom {
        let donor = &members[top[rng.random_range(0..k)]];
        let (config, _) = explore(&donor.config, space, opts.p_perturb, &mut rng);
        out[receiver] = Directive {
            member: members[receiver].id,
            action: Action::CloneFrom {
                donor: donor.id,
                copy_history: opts.copy_history,
            },
            new_config: Some(config),
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    /// Cumulative number of trials each configuration has had at this rung.
    pub budget: u64,
    pub n_configs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub n_configs: u64,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    /// Trials charged when survivors continue from their checkpoints.
    pub fn trials(&self) -> u64 {
        let mut prev = 0;
        let mut total = 0;
        for r in &self.rungs {
            total += r.n_configs * (r.budget - prev);
            prev = r.budget;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandPlan {
    pub b_min: u64,
    pub b_max: u64,
    pub eta: u64,
    pub s_max: u32,
    /// One entry per Successive Halving run, in execution order.
    pub brackets: Vec<Bracket>,
}

impl HyperbandPlan {
    pub fn total_trials(&self) -> u64 {
        self.brackets.iter().map(Bracket::trials).sum()
    }

    pub fn total_configs(&self) -> u64 {
        self.brackets.iter().map(|b| b.n_configs).sum()
    }
}

/// Hyperband's bracket ladder with starting budget `b_max * eta^-s`
/// (rounded, at least one trial); `n_iterations` Successive Halving runs
/// cycle through `s = s_max, ..., 0`.
pub fn hyperband_plan(
    b_min: u64,
    b_max: u64,
    eta: u64,
    n_iterations: usize,
) -> Result<HyperbandPlan, SchedulerError> {
    if b_min == 0 || b_min > b_max {
        return Err(SchedulerError::InvalidBudget { b_min, b_max });
    }
    if eta < 2 {
        return Err(SchedulerError::InvalidOptions("eta must be at least 2".into()));
    }
    // floor(log_eta(b_max / b_min)) in exact integer arithmetic.
    let mut s_max = 0u32;
    let mut reach = b_min;
    while let Some(next) = reach.checked_mul(eta).filter(|&n| n <= b_max) {
        reach = next;
        s_max += 1;
    }
    let cycle: Vec<Bracket> = (0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) as f64 / (s + 1) as f64 * (eta as f64).powi(s as i32)).ceil()
                as u64;
            let mut rungs = Vec::with_capacity(s as usize + 1);
            let mut n_i = n;
            for i in 0..=s {
                let budget =
                    ((b_max as f64 / (eta as f64).powi((s - i) as i32)).round() as u64).max(1);
                rungs.push(Rung {
                    budget,
                    n_configs: n_i,
                });
                n_i /= eta;
            }
            Bracket {
                s,
                n_configs: n,
                rungs,
            }
        })
        .collect();
    let brackets = (0..n_iterations)
        .map(|i| cycle[i % cycle.len()].clone())
        .collect();
    Ok(HyperbandPlan {
        b_min,
        b_max,
        eta,
        s_max,
        brackets,
    })
}

/// Random search as a degenerate plan: one rung at the full budget.
pub fn random_search_plan(n_configs: u64, budget: u64) -> HyperbandPlan {
    HyperbandPlan {
        b_min: budget,
        b_max: budget,
        eta: 2,
        s_max: 0,
        brackets: vec![Bracket {
            s: 0,
            n_configs,
            rungs: vec![Rung {
                budget,
                n_configs,
            }],
        }],
    }
}

/// Top `floor(n / eta)` entries by score, best first; ties keep input order.
pub fn successive_halving_promote<T: Clone>(rung: &[(T, f64)], eta: u64) -> Vec<T> {
    let keep = rung.len() / eta.max(1) as usize;
    let mut order: Vec<usize> = (0..rung.len()).collect();
    order.sort_by(|&a, &b| sort_key(rung[b].1).total_cmp(&sort_key(rung[a].1)).then(a.cmp(&b)));
    order[..keep].iter().map(|&i| rung[i].0.clone()).collect()
}

pub const DEFAULT_ARCHIVE_CAPACITY: usize = 10;
pub const DEFAULT_BACKTRACK_EVERY: u64 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Elite<P> {
    pub score: f64,
    pub payload: P,
    pub config: Configuration,
    /// Barrier step and member the elite was taken from.
    pub step: u64,
    pub member: MemberId,
}

/// Best-ever snapshots across all elapsed PBT steps, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct EliteArchive<P> {
    capacity: usize,
    entries: Vec<Elite<P>>,
}

impl<P> Default for EliteArchive<P> {
    fn default() -> Self {
        Self::new(DEFAULT_ARCHIVE_CAPACITY)
    }
}

impl<P> EliteArchive<P> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "archive capacity must be positive");
        EliteArchive {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn from_entries(capacity: usize, mut entries: Vec<Elite<P>>) -> Self {
        entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        entries.truncate(capacity);
        EliteArchive { capacity, entries }
    }

    pub fn entries(&self) -> &[Elite<P>] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Would an entry with this score be kept?
    pub fn admits(&self, score: f64) -> bool {
        score.is_finite()
            && (self.entries.len() < self.capacity
                || self.entries.last().is_some_and(|w| score > w.score))
    }

    /// Inserts if the archive has room or `elite` beats its worst entry.
    pub fn offer(&mut self, elite: Elite<P>) -> bool {
        if !self.admits(elite.score) {
            return false;
        }
        let pos = self.entries.partition_point(|e| e.score >= elite.score);
        self.entries.insert(pos, elite);
        self.entries.truncate(self.capacity);
        true
    }
}

/// PBT with backtracking. Every call offers the top members to the archive;
/// `snapshot` is asked for a payload only for members the archive admits.
/// On every `backtrack_every`-th step (`step_index` counts barriers from 1)
/// the bottom quantile restores uniformly sampled elites, each perturbed until
/// its config differs from every other live member's. Other steps, and
/// backtracking steps with an empty archive, fall back to [`pbt_step`].
#[allow(clippy::too_many_arguments)]
pub fn pbt_bt_step<P: Clone>(
    members: &[MemberScore],
    mut archive: EliteArchive<P>,
    opts: &PbtOptions,
    space: &ParamSpace,
    backtrack_every: u64,
    step_index: u64,
    seed: u64,
    mut snapshot: impl FnMut(MemberId) -> P,
) -> Result<(Vec<Directive>, EliteArchive<P>), SchedulerError> {
    opts.validate()?;
    if backtrack_every == 0 {
        return Err(SchedulerError::InvalidOptions(
            "backtrack_every must be at least 1".into(),
        ));
    }
    let order = rank_members(members);
    let k = opts.truncation_count(members.len());
    for &i in order.iter().take(k.max(1)) {
        let m = &members[i];
        if archive.admits(m.score) {
            archive.offer(Elite {
                score: m.score,
                payload: snapshot(m.id),
                config: m.config.clone(),
                step: step_index,
                member: m.id,
            });
        }
    }

    let fires = step_index > 0 && step_index.is_multiple_of(backtrack_every) && k > 0;
    if !fires {
        return Ok((pbt_step(members, opts, space, seed)?, archive));
    }
    if archive.is_empty() {
        log::warn!("{}; backtracking skipped", SchedulerError::EmptyArchive);
        return Ok((pbt_step(members, opts, space, seed)?, archive));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bottom = order[order.len() - k..].to_vec();
    bottom.sort_unstable();
    let mut live: Vec<Option<Configuration>> = members.iter().map(|m| Some(m.config.clone())).collect();
    for &i in &bottom {
        live[i] = None;
    }
    let mut out: Vec<Directive> = members.iter().map(|m| Directive::continue_(m.id)).collect();
    for receiver in bottom {
        let elite = rng.random_range(0..archive.len());
        let config = unique_config(&archive.entries()[elite].config, space, &live, &mut rng);
        live[receiver] = Some(config.clone());
        out[receiver] = Directive {
            member: members[receiver].id,
            action: Action::Backtrack { elite },
            new_config: Some(config),
        };
    }
    Ok((out, archive))
}

const MAX_UNIQUE_ATTEMPTS: usize = 1000;

fn unique_config(
    start: &Configuration,
    space: &ParamSpace,
    live: &[Option<Configuration>],
    rng: &mut ChaCha8Rng,
) -> Configuration {
    let collides = |c: &Configuration| live.iter().flatten().any(|l| l.same_values(c));
    let mut config = start.clone();
    for _ in 0..MAX_UNIQUE_ATTEMPTS {
        config = perturb(&config, space, rng);
        if !collides(&config) {
            return config;
        }
    }
    // Perturbation can stall on a clamped corner; fresh samples always escape
    // unless the space is (nearly) exhausted.
    loop {
        let c = sample(space, rng);
        if !collides(&c) {
            return c;
        }
    }
}

//! Population runs: members train concurrently between barriers, a scheduler
//! decides at each barrier, and every event is appended to the run log.
//!
//! Output directory:
//!
//! - `runlog.ndjson`: the run log (deterministic for a given config)
//! - `state.json`: resume point, written after every barrier
//! - `checkpoints/`: latest state per member plus the elite archive
//! - `timings.csv`: wall-clock seconds per trial (kept out of the log)
//! - `schedule.csv`: the best member's schedule, written at the end

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::lineage_schedule;
use crate::confspace::{self, Configuration, Group, ParamSpace, SpaceFile};
use crate::envs::{Environment, Pendulum, PointPusher};
use crate::error::{RunError, TrainError};
use crate::mbrl::{PetsOptions, PetsTrainable};
use crate::runlog::{
    DirectiveRecord, LogWriter, MemberState, Record, RunHeader, RunLog, RungRecord, Schedule,
    SnapshotRecord, StateSource, SummaryRecord, TrialRecord, RUNLOG_FILE,
};
use crate::schedulers::{
    hyperband_plan, pbt_bt_step, pbt_step, random_search_plan, successive_halving_promote, Action,
    Directive, Elite, EliteArchive, HyperbandPlan, MemberId, MemberScore, PbtOptions,
};
use crate::trainable::{synthetic_space, DriftSurface, SyntheticTrainable, Trainable, TrainableCheckpoint};

pub const WORKERS_ENV: &str = "TUNE_MBRL_WORKERS";
pub const STATE_FILE: &str = "state.json";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Name of the cheap test environment, which uses [`SyntheticTrainable`].
pub const SYNTHETIC_ENV: &str = "synthetic";

// Reserved trial indices / member ids inside the seed tree.
const MODEL_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;
const SCHEDULER_STREAM: u64 = u64::MAX;

/// Seed for one member's trial: the first eight bytes of
/// SHA-256 over the little-endian triple.
pub fn seed_tree(master_seed: u64, member: u64, trial: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(member.to_le_bytes());
    h.update(trial.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Random,
    Hyperband,
    Pbt,
    PbtBt,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Random => "random",
            SchedulerKind::Hyperband => "hyperband",
            SchedulerKind::Pbt => "pbt",
            SchedulerKind::PbtBt => "pbt_bt",
        }
    }

    fn is_population(self) -> bool {
        matches!(self, SchedulerKind::Pbt | SchedulerKind::PbtBt)
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self, RunError> {
        match s {
            "random" => Ok(SchedulerKind::Random),
            "hyperband" => Ok(SchedulerKind::Hyperband),
            "pbt" => Ok(SchedulerKind::Pbt),
            "pbt_bt" | "pbt-bt" => Ok(SchedulerKind::PbtBt),
            other => Err(RunError::Config(format!("unknown scheduler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandOptions {
    pub b_min: u64,
    pub b_max: u64,
    pub eta: u64,
    pub n_iterations: usize,
}

impl Default for HyperbandOptions {
    fn default() -> Self {
        HyperbandOptions {
            b_min: 3,
            b_max: 30,
            eta: 3,
            n_iterations: 15,
        }
    }
}

/// Everything that determines a run's log. `workers` only affects speed and
/// is excluded from the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheduler: SchedulerKind,
    /// Built-in space name or path to a `.space` file.
    pub space: String,
    pub group: Group,
    pub env: String,
    /// Overrides the environment's episode length.
    pub env_horizon: Option<usize>,
    /// PBT population, or number of random-search configurations.
    pub population: usize,
    /// PBT exploit interval; defaults from the episode length.
    pub interval: Option<u64>,
    /// Trials per member (PBT, random search).
    pub budget: u64,
    pub hyperband: HyperbandOptions,
    pub copy_history: bool,
    pub truncation_quantile: f64,
    pub p_perturb: f64,
    pub backtrack_every: u64,
    pub archive_capacity: usize,
    pub master_seed: u64,
    pub pets: PetsOptions,
    /// Surface used by the synthetic environment.
    pub drift: DriftSurface,
    #[serde(skip, default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        let pbt = PbtOptions::default();
        RunConfig {
            scheduler: SchedulerKind::Pbt,
            space: "desk".into(),
            group: Group::CemOptimizer,
            env: "pendulum".into(),
            env_horizon: None,
            population: pbt.population_size,
            interval: None,
            budget: 30,
            hyperband: HyperbandOptions::default(),
            copy_history: pbt.copy_history,
            truncation_quantile: pbt.truncation_quantile,
            p_perturb: pbt.p_perturb,
            backtrack_every: crate::schedulers::DEFAULT_BACKTRACK_EVERY,
            archive_capacity: crate::schedulers::DEFAULT_ARCHIVE_CAPACITY,
            master_seed: 0,
            pets: PetsOptions::default(),
            drift: DriftSurface::default(),
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Worker count after applying the environment override.
    pub fn resolved_workers(&self) -> usize {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&w| w > 0)
            .unwrap_or(self.workers)
            .max(1)
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_synthetic(&self) -> bool {
        self.env == SYNTHETIC_ENV
    }

    pub fn make_env(&self) -> Result<Arc<dyn Environment>, RunError> {
        let h = self.env_horizon;
        match self.env.as_str() {
            "pendulum" => {
                let mut e = Pendulum::default();
                if let Some(h) = h {
                    e.horizon = h;
                }
                Ok(Arc::new(e))
            }
            "pusher2d" => {
                let mut e = PointPusher::default();
                if let Some(h) = h {
                    e.horizon = h;
                }
                Ok(Arc::new(e))
            }
            other => Err(RunError::Config(format!("unknown environment {other:?}"))),
        }
    }

    /// Episode length used to pick the default interval.
    fn episode_len(&self) -> Result<usize, RunError> {
        if self.is_synthetic() {
            return Ok(self.env_horizon.unwrap_or(1));
        }
        Ok(self.make_env()?.horizon())
    }

    pub fn effective_interval(&self) -> Result<u64, RunError> {
        Ok(match self.interval {
            Some(i) => i,
            None => PbtOptions::interval_for_horizon(self.episode_len()?),
        })
    }

    pub fn pbt_options(&self) -> Result<PbtOptions, RunError> {
        Ok(PbtOptions {
            population_size: self.population,
            truncation_quantile: self.truncation_quantile,
            interval: self.effective_interval()?,
            p_perturb: self.p_perturb,
            copy_history: self.copy_history,
        })
    }

    /// Tuned space (synthetic: the single `h` parameter).
    pub fn tuned_space(&self) -> Result<ParamSpace, RunError> {
        if self.is_synthetic() {
            return Ok(synthetic_space());
        }
        Ok(SpaceFile::load_named_or_path(&self.space)?.space(self.group))
    }

    pub fn plan(&self) -> Result<HyperbandPlan, RunError> {
        match self.scheduler {
            SchedulerKind::Random => Ok(random_search_plan(self.population as u64, self.budget)),
            SchedulerKind::Hyperband => {
                let h = self.hyperband;
                Ok(hyperband_plan(h.b_min, h.b_max, h.eta, h.n_iterations)?)
            }
            _ => Err(RunError::Config("population schedulers have no bracket plan".into())),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if !self.is_synthetic() {
            self.make_env()?;
            if self.pets.hidden.is_empty() || self.pets.hidden.contains(&0) {
                return bad("hidden layer widths must be positive".into());
            }
            if self.pets.ensemble_size == 0 || self.pets.particles == 0 {
                return bad("ensemble size and particle count must be positive".into());
            }
        } else if !(self.drift.drift_period > 0 && self.drift.low <= self.drift.high) {
            return bad("drift surface needs a positive period and low <= high".into());
        }
        if self.env_horizon == Some(0) {
            return bad("environment horizon must be positive".into());
        }
        self.tuned_space()?;
        match self.scheduler {
            SchedulerKind::Random => {
                if self.population == 0 || self.budget == 0 {
                    return bad("random search needs positive population and budget".into());
                }
            }
            SchedulerKind::Hyperband => {
                if self.hyperband.n_iterations == 0 {
                    return bad("hyperband needs at least one iteration".into());
                }
                self.plan()?;
            }
            SchedulerKind::Pbt | SchedulerKind::PbtBt => {
                if self.budget == 0 {
                    return bad("budget must be positive".into());
                }
                if self.interval == Some(0) {
                    return bad("interval must be positive".into());
                }
                self.pbt_options()?.validate()?;
                if self.scheduler == SchedulerKind::PbtBt && (self.backtrack_every == 0 || self.archive_capacity == 0) {
                    return bad("backtracking needs positive period and archive capacity".into());
                }
            }
        }
        Ok(())
    }
}

/// Builds fresh trainables for one configuration of environment and space.
/// `model_seed` seeds network initialization.
pub struct MemberFactory {
    synthetic: Option<DriftSurface>,
    env: Option<Arc<dyn Environment>>,
    space: ParamSpace,
    base: Configuration,
    pets: PetsOptions,
}

impl MemberFactory {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        if config.is_synthetic() {
            return Ok(MemberFactory {
                synthetic: Some(config.drift),
                env: None,
                space: synthetic_space(),
                base: Configuration::new(),
                pets: config.pets.clone(),
            });
        }
        let file = SpaceFile::load_named_or_path(&config.space)?;
        Ok(MemberFactory {
            synthetic: None,
            env: Some(config.make_env()?),
            space: file.space(config.group),
            base: file.defaults(),
            pets: config.pets.clone(),
        })
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn build(&self, model_seed: u64) -> Result<Box<dyn Trainable>, TrainError> {
        if let Some(surface) = self.synthetic {
            return Ok(Box::new(SyntheticTrainable::new(surface)));
        }
        let env = self.env.clone().expect("non-synthetic factory has an env");
        Ok(Box::new(PetsTrainable::new(
            env,
            self.space.clone(),
            self.base.clone(),
            self.pets.clone(),
            model_seed,
        )?))
    }
}

/// Smallest group of `file` whose defaults name every parameter in `names`.
pub fn infer_group<'a>(file: &SpaceFile, names: impl IntoIterator<Item = &'a str> + Clone) -> Option<Group> {
    [Group::ModelTrain, Group::CemOptimizer, Group::Joint]
        .into_iter()
        .find(|&g| {
            let space = file.space(g);
            let all = names.clone().into_iter().all(|n| space.spec(n).is_some());
            all && names.clone().into_iter().count() == space.len()
        })
}

/// Interrupt a run after this many barriers (for testing resume).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub stop_after_barriers: Option<u64>,
}

#[derive(Debug)]
pub enum RunStatus {
    Completed(RunLog),
    Interrupted { barriers: u64 },
}

impl RunStatus {
    pub fn into_log(self) -> Option<RunLog> {
        match self {
            RunStatus::Completed(l) => Some(l),
            RunStatus::Interrupted { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedMember {
    id: MemberId,
    config: Configuration,
    failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedElite {
    score: f64,
    config: Configuration,
    step: u64,
    member: MemberId,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedState {
    config_hash: String,
    completed_barriers: u64,
    log_bytes: u64,
    done: bool,
    members: Vec<PersistedMember>,
    archive: Vec<PersistedElite>,
}

/// Runs a search to completion, resuming from `out` if a compatible
/// persisted state exists.
pub fn run(config: &RunConfig, out: &Path) -> Result<RunLog, RunError> {
    match run_with(config, out, RunControl::default())? {
        RunStatus::Completed(log) => Ok(log),
        RunStatus::Interrupted { .. } => unreachable!("no stop requested"),
    }
}

pub fn run_with(config: &RunConfig, out: &Path, control: RunControl) -> Result<RunStatus, RunError> {
    config.validate()?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| RunError::io(out, e))?;
    let hash = config.config_hash();
    let state_path = out.join(STATE_FILE);
    let persisted: Option<PersistedState> = if state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(|e| RunError::io(&state_path, e))?;
        let s: PersistedState =
            serde_json::from_str(&text).map_err(|e| RunError::Log(format!("{}: {e}", state_path.display())))?;
        if s.config_hash != hash {
            return Err(RunError::ResumeMismatch {
                persisted: s.config_hash,
                current: hash,
            });
        }
        Some(s)
    } else {
        None
    };
    if let Some(s) = &persisted {
        if s.done {
            return Ok(RunStatus::Completed(RunLog::read(out.join(RUNLOG_FILE))?));
        }
    }
    let factory = MemberFactory::new(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.resolved_workers())
        .build()
        .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
    let member_ids = if config.scheduler.is_population() {
        (0..config.population as u32).map(MemberId).collect()
    } else {
        (0..config.plan()?.total_configs() as u32).map(MemberId).collect()
    };
    let header = RunHeader {
        run_id: hash[..16].to_string(),
        scheduler: config.scheduler.as_str().into(),
        group: if config.is_synthetic() { "synthetic".into() } else { config.group.as_str().into() },
        env: config.env.clone(),
        master_seed: config.master_seed,
        members: member_ids,
        config: serde_json::to_value(config).expect("config serializes"),
    };
    let log_path = out.join(RUNLOG_FILE);
    let writer = match &persisted {
        Some(s) => LogWriter::reopen_truncated(&log_path, s.log_bytes)?,
        None => LogWriter::create(&log_path, &header)?,
    };
    let mut ctx = Ctx {
        config,
        out: out.to_path_buf(),
        hash,
        factory,
        pool,
        writer,
        timings: Vec::new(),
        control,
    };
    let interrupted = if config.scheduler.is_population() {
        ctx.run_population(persisted)?
    } else {
        ctx.run_brackets(persisted)?
    };
    if let Some(barriers) = interrupted {
        return Ok(RunStatus::Interrupted { barriers });
    }
    ctx.finish()
}

struct Slot {
    id: MemberId,
    trainable: Box<dyn Trainable>,
    config: Configuration,
    failed: bool,
}

struct IntervalResult {
    trials: Vec<TrialRecord>,
    seconds: Vec<(u64, f64)>,
}

/// Runs `n` trials on one member; a returned error or a panic marks it failed.
fn run_trials(slot: &mut Slot, step: u64, n: u64, master: u64) -> IntervalResult {
    let mut trials = Vec::new();
    let mut seconds = Vec::new();
    if slot.failed {
        return IntervalResult { trials, seconds };
    }
    for _ in 0..n {
        let trial = slot.trainable.trial_index();
        let seed = seed_tree(master, slot.id.0 as u64, trial);
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| slot.trainable.step(&slot.config, seed)));
        seconds.push((trial, start.elapsed().as_secs_f64()));
        let result = match outcome {
            Ok(r) => r.map_err(|e| e.to_string()),
            Err(p) => Err(panic_message(&p)),
        };
        match result {
            Ok(ret) => trials.push(TrialRecord {
                step,
                member: slot.id,
                trial,
                config: slot.config.clone(),
                ret: Some(ret),
                score: slot.trainable.score().ok(),
                failed: false,
                error: None,
            }),
            Err(e) => {
                log::warn!("member {} failed at trial {trial}: {e}", slot.id);
                slot.failed = true;
                trials.push(TrialRecord {
                    step,
                    member: slot.id,
                    trial,
                    config: slot.config.clone(),
                    ret: None,
                    score: None,
                    failed: true,
                    error: Some(e),
                });
                break;
            }
        }
    }
    IntervalResult { trials, seconds }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("worker panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("worker panicked: {s}")
    } else {
        "worker panicked".into()
    }
}

fn slot_score(slot: &Slot) -> f64 {
    if slot.failed {
        return f64::NEG_INFINITY;
    }
    slot.trainable.score().unwrap_or(f64::NEG_INFINITY)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| RunError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunError::io(path, e))
}

struct Ctx<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    hash: String,
    factory: MemberFactory,
    pool: rayon::ThreadPool,
    writer: LogWriter,
    timings: Vec<(u64, MemberId, u64, f64)>,
    control: RunControl,
}

impl Ctx<'_> {
    fn master(&self) -> u64 {
        self.config.master_seed
    }

    fn new_slot(&self, id: MemberId) -> Result<Slot, RunError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_tree(self.master(), id.0 as u64, INIT_STREAM));
        let config = confspace::sample(self.factory.space(), &mut rng);
        Ok(Slot {
            id,
            trainable: self.factory.build(seed_tree(self.master(), id.0 as u64, MODEL_STREAM))?,
            config,
            failed: false,
        })
    }

    fn member_ckpt_path(&self, id: MemberId) -> PathBuf {
        self.out.join(CHECKPOINT_DIR).join(format!("member_{}.ckpt", id.0))
    }

    fn restore_slot(&self, p: &PersistedMember) -> Result<Slot, RunError> {
        let mut slot = self.new_slot(p.id)?;
        slot.config = p.config.clone();
        slot.failed = p.failed;
        if !p.failed {
            let path = self.member_ckpt_path(p.id);
            let bytes = fs::read(&path).map_err(|e| RunError::io(&path, e))?;
            slot.trainable.restore(&TrainableCheckpoint::from_bytes(&bytes)?)?;
        }
        Ok(slot)
    }

    fn run_interval(&mut self, slots: &mut [Slot], step: u64, n: u64) -> Vec<TrialRecord> {
        let master = self.master();
        let results: Vec<IntervalResult> = self
            .pool
            .install(|| slots.par_iter_mut().map(|s| run_trials(s, step, n, master)).collect());
        let mut trials = Vec::new();
        for (slot, r) in slots.iter().zip(results) {
            for (trial, secs) in r.seconds {
                self.timings.push((step, slot.id, trial, secs));
            }
            trials.extend(r.trials);
        }
        trials
    }

    fn snapshot(slots: &[Slot], step: u64) -> Record {
        Record::Snapshot(SnapshotRecord {
            step,
            members: slots
                .iter()
                .map(|s| MemberState {
                    member: s.id,
                    trial: s.trainable.trial_index(),
                    score: finite(slot_score(s)),
                    config: s.config.clone(),
                })
                .collect(),
        })
    }

    /// Appends the barrier's records, then persists member checkpoints and
    /// the resume point. Returns whether the run should stop here.
    fn commit_barrier(
        &mut self,
        records: Vec<Record>,
        slots: &[Slot],
        archive: Vec<PersistedElite>,
        completed: u64,
    ) -> Result<bool, RunError> {
        self.writer.append(&records)?;
        for s in slots.iter().filter(|s| !s.failed) {
            write_atomic(&self.member_ckpt_path(s.id), &s.trainable.checkpoint(true).to_bytes())?;
        }
        let state = PersistedState {
            config_hash: self.hash.clone(),
            completed_barriers: completed,
            log_bytes: self.writer.byte_len()?,
            done: false,
            members: slots
                .iter()
                .map(|s| PersistedMember {
                    id: s.id,
                    config: s.config.clone(),
                    failed: s.failed,
                })
                .collect(),
            archive,
        };
        self.write_state(&state)?;
        self.flush_timings()?;
        Ok(self.control.stop_after_barriers.is_some_and(|k| completed >= k))
    }

    fn write_state(&self, state: &PersistedState) -> Result<(), RunError> {
        let text = serde_json::to_vec_pretty(state).expect("state serializes");
        write_atomic(&self.out.join(STATE_FILE), &text)
    }

    fn flush_timings(&mut self) -> Result<(), RunError> {
        use std::io::Write;
        let path = self.out.join(TIMINGS_FILE);
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| RunError::io(&path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str("step,member,trial,seconds\n");
        }
        for (step, m, trial, secs) in self.timings.drain(..) {
            text.push_str(&format!("{step},{m},{trial},{secs:.6}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| RunError::io(&path, e))
    }

    /// Returns the barrier count if the run was interrupted.
    fn run_population(&mut self, persisted: Option<PersistedState>) -> Result<Option<u64>, RunError> {
        let opts = self.config.pbt_options()?;
        let space = self.factory.space().clone();
        let backtracking = self.config.scheduler == SchedulerKind::PbtBt;
        let n_barriers = self.config.budget.div_ceil(opts.interval);
        let (mut slots, mut archive, start) = match persisted {
            Some(p) => {
                let slots = p.members.iter().map(|m| self.restore_slot(m)).collect::<Result<Vec<_>, _>>()?;
                let mut entries = Vec::new();
                for e in &p.archive {
                    let path = self.out.join(CHECKPOINT_DIR).join(&e.file);
                    let bytes = fs::read(&path).map_err(|err| RunError::io(&path, err))?;
                    entries.push(Elite {
                        score: e.score,
                        payload: TrainableCheckpoint::from_bytes(&bytes)?,
                        config: e.config.clone(),
                        step: e.step,
                        member: e.member,
                    });
                }
                (slots, EliteArchive::from_entries(self.config.archive_capacity, entries), p.completed_barriers)
            }
            None => {
                let slots = (0..self.config.population as u32)
                    .map(|i| self.new_slot(MemberId(i)))
                    .collect::<Result<Vec<_>, _>>()?;
                (slots, EliteArchive::new(self.config.archive_capacity), 0)
            }
        };

        for step in start..n_barriers {
            let done = step * opts.interval;
            let n = opts.interval.min(self.config.budget - done);
            let trials = self.run_interval(&mut slots, step, n);
            let mut records: Vec<Record> = trials.into_iter().map(Record::Trial).collect();

            let scores: Vec<MemberScore> = slots
                .iter()
                .map(|s| MemberScore {
                    id: s.id,
                    score: slot_score(s),
                    config: s.config.clone(),
                })
                .collect();
            let seed = seed_tree(self.master(), SCHEDULER_STREAM, step);
            let directives: Vec<Directive> = if backtracking {
                let copy = self.config.copy_history;
                let by_id: BTreeMap<MemberId, &Slot> = slots.iter().map(|s| (s.id, s)).collect();
                let (d, a) = pbt_bt_step(
                    &scores,
                    std::mem::take(&mut archive),
                    &opts,
                    &space,
                    self.config.backtrack_every,
                    step + 1,
                    seed,
                    |id| by_id[&id].trainable.checkpoint(copy),
                )?;
                archive = a;
                d
            } else {
                pbt_step(&scores, &opts, &space, seed)?
            };
            records.extend(self.apply_directives(&mut slots, &directives, &archive, step));
            records.push(Self::snapshot(&slots, step));
            let persisted_archive = self.persist_archive(&archive)?;
            if self.commit_barrier(records, &slots, persisted_archive, step + 1)? && step + 1 < n_barriers {
                return Ok(Some(step + 1));
            }
        }
        Ok(None)
    }

    /// Clones read donor state from before any directive of this barrier.
    fn apply_directives(
        &self,
        slots: &mut [Slot],
        directives: &[Directive],
        archive: &EliteArchive<TrainableCheckpoint>,
        step: u64,
    ) -> Vec<Record> {
        let index: BTreeMap<MemberId, usize> = slots.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mut donors: BTreeMap<(MemberId, bool), TrainableCheckpoint> = BTreeMap::new();
        for d in directives {
            if let Action::CloneFrom { donor, copy_history } = d.action {
                donors
                    .entry((donor, copy_history))
                    .or_insert_with(|| slots[index[&donor]].trainable.checkpoint(copy_history));
            }
        }
        let mut records = Vec::new();
        for d in directives {
            let i = index[&d.member];
            let (ckpt, source) = match &d.action {
                Action::CloneFrom { donor, copy_history } => (
                    Some(&donors[&(*donor, *copy_history)]),
                    Some(StateSource { member: *donor, step }),
                ),
                Action::Backtrack { elite } => {
                    let e = &archive.entries()[*elite];
                    (
                        Some(&e.payload),
                        Some(StateSource {
                            member: e.member,
                            step: e.step - 1,
                        }),
                    )
                }
                _ => (None, None),
            };
            let slot = &mut slots[i];
            if let Some(ckpt) = ckpt {
                match slot.trainable.restore(ckpt) {
                    Ok(()) => slot.failed = false,
                    Err(e) => {
                        log::warn!("member {} could not restore: {e}", slot.id);
                        slot.failed = true;
                    }
                }
            }
            if let Some(c) = &d.new_config {
                slot.config = c.clone();
            }
            records.push(Record::Directive(DirectiveRecord {
                step,
                member: d.member,
                action: d.action.clone(),
                trial: slot.trainable.trial_index(),
                source,
                config: slot.config.clone(),
            }));
        }
        records
    }

    /// Writes archive payloads that are not on disk yet and removes evicted ones.
    fn persist_archive(&self, archive: &EliteArchive<TrainableCheckpoint>) -> Result<Vec<PersistedElite>, RunError> {
        let dir = self.out.join(CHECKPOINT_DIR);
        let mut keep = Vec::new();
        for e in archive.entries() {
            let file = format!("elite_{}_{}.ckpt", e.step, e.member.0);
            let path = dir.join(&file);
            if !path.exists() {
                write_atomic(&path, &e.payload.to_bytes())?;
            }
            keep.push(PersistedElite {
                score: e.score,
                config: e.config.clone(),
                step: e.step,
                member: e.member,
                file,
            });
        }
        if let Ok(listing) = fs::read_dir(&dir) {
            for entry in listing.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("elite_") && !keep.iter().any(|k| k.file == name) {
                    let _ = fs::remove_file(entry.path());
                }
            }
        }
        Ok(keep)
    }

    fn run_brackets(&mut self, persisted: Option<PersistedState>) -> Result<Option<u64>, RunError> {
        let plan = self.config.plan()?;
        let eta = plan.eta;
        let start = persisted.as_ref().map_or(0, |p| p.completed_barriers);
        let mut active: Vec<Slot> = match &persisted {
            Some(p) => p.members.iter().map(|m| self.restore_slot(m)).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let mut step = 0u64;
        let mut first_id = 0u32;
        let total_steps: u64 = plan.brackets.iter().map(|b| b.rungs.len() as u64).sum();
        for (b, bracket) in plan.brackets.iter().enumerate() {
            let mut prev_budget = 0;
            for (r, rung) in bracket.rungs.iter().enumerate() {
                if step < start {
                    prev_budget = rung.budget;
                    step += 1;
                    continue;
                }
                if r == 0 {
                    active = (first_id..first_id + bracket.n_configs as u32)
                        .map(|i| self.new_slot(MemberId(i)))
                        .collect::<Result<_, _>>()?;
                }
                let trials = self.run_interval(&mut active, step, rung.budget - prev_budget);
                let mut records: Vec<Record> = trials.into_iter().map(Record::Trial).collect();
                let scored: Vec<(MemberId, f64)> = active.iter().map(|s| (s.id, slot_score(s))).collect();
                records.extend(scored.iter().map(|&(member, score)| {
                    Record::Rung(RungRecord {
                        step,
                        member,
                        bracket: b as u64,
                        rung: r as u64,
                        budget: rung.budget,
                        score: finite(score),
                    })
                }));
                let last = r + 1 == bracket.rungs.len();
                if !last {
                    let survivors = successive_halving_promote(&scored, eta);
                    let next_budget = bracket.rungs[r + 1].budget;
                    for s in &active {
                        let action = if survivors.contains(&s.id) {
                            Action::Promote { budget: next_budget }
                        } else {
                            Action::Stop
                        };
                        records.push(Record::Directive(DirectiveRecord {
                            step,
                            member: s.id,
                            action,
                            trial: s.trainable.trial_index(),
                            source: None,
                            config: s.config.clone(),
                        }));
                    }
                    records.push(Self::snapshot(&active, step));
                    active.retain(|s| survivors.contains(&s.id));
                } else {
                    records.push(Self::snapshot(&active, step));
                    active.clear();
                }
                prev_budget = rung.budget;
                step += 1;
                if self.commit_barrier(records, &active, Vec::new(), step)? && step < total_steps {
                    return Ok(Some(step));
                }
            }
            first_id += bracket.n_configs as u32;
        }
        Ok(None)
    }

    /// Appends the summary, writes the best schedule and marks the state done.
    fn finish(mut self) -> Result<RunStatus, RunError> {
        let log_path = self.out.join(RUNLOG_FILE);
        let mut log = RunLog::read(&log_path)?;
        let (best, best_score) = best_final_member(&log, self.config.scheduler)
            .ok_or_else(|| RunError::Log("run produced no trials".into()))?;
        let schedule = if self.config.scheduler.is_population() {
            lineage_schedule(&log, best)?
        } else {
            let config = log
                .trials()
                .find(|t| t.member == best)
                .map(|t| t.config.clone())
                .ok_or_else(|| RunError::Log("best member has no trials".into()))?;
            Schedule::constant(config)
        };
        let summary = Record::Summary(SummaryRecord {
            best_member: best,
            best_score,
            schedule: schedule.clone(),
        });
        self.writer.append(std::slice::from_ref(&summary))?;
        log.records.push(summary);
        fs::write(self.out.join(SCHEDULE_FILE), schedule.to_csv()?).map_err(|e| RunError::io(&self.out, e))?;
        let state = PersistedState {
            config_hash: self.hash.clone(),
            completed_barriers: u64::MAX,
            log_bytes: self.writer.byte_len()?,
            done: true,
            members: Vec::new(),
            archive: Vec::new(),
        };
        self.write_state(&state)?;
        Ok(RunStatus::Completed(log))
    }
}

/// Best member by the scores of the final step (population schedulers) or
/// of the largest-budget rung (bracket schedulers); ties go to the lower id.
pub fn best_final_member(log: &RunLog, scheduler: SchedulerKind) -> Option<(MemberId, Option<f64>)> {
    let mut candidates: BTreeMap<MemberId, f64> = BTreeMap::new();
    let key = |s: Option<f64>| s.filter(|v| v.is_finite()).unwrap_or(f64::NEG_INFINITY);
    if scheduler.is_population() {
        let last_step = log.trials().map(|t| t.step).max()?;
        for t in log.trials().filter(|t| t.step == last_step) {
            candidates.insert(t.member, key(t.score));
        }
        // Members that failed before the last step still count, at the bottom.
        for m in &log.header.members {
            candidates.entry(*m).or_insert(f64::NEG_INFINITY);
        }
    } else {
        let top = log.rungs().map(|r| r.budget).max()?;
        for r in log.rungs().filter(|r| r.budget == top) {
            candidates.insert(r.member, key(r.score));
        }
    }
    candidates
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(m, s)| (*m, finite(*s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic(scheduler: SchedulerKind) -> RunConfig {
        RunConfig {
            scheduler,
            env: SYNTHETIC_ENV.into(),
            population: 6,
            interval: Some(5),
            budget: 30,
            drift: DriftSurface {
                drift_period: 20,
                ..DriftSurface::default()
            },
            hyperband: HyperbandOptions {
                b_min: 2,
                b_max: 18,
                eta: 3,
                n_iterations: 3,
            },
            backtrack_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn seed_tree_is_deterministic_and_member_local() {
        assert_eq!(seed_tree(7, 3, 11), seed_tree(7, 3, 11));
        assert_ne!(seed_tree(7, 3, 11), seed_tree(7, 4, 11));
        assert_ne!(seed_tree(7, 3, 11), seed_tree(8, 3, 11));
    }

    #[test]
    fn seed_tree_has_no_collisions_over_a_million_triples() {
        let mut seen = HashSet::with_capacity(1_000_000);
        for master in 0..10u64 {
            for member in 0..100u64 {
                for trial in 0..1000u64 {
                    assert!(seen.insert(seed_tree(master, member, trial)));
                }
            }
        }
        assert_eq!(seen.len(), 1_000_000);
    }

    #[test]
    fn hash_ignores_worker_count() {
        let a = synthetic(SchedulerKind::Pbt);
        let b = RunConfig { workers: 8, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { master_seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let zero = RunConfig { budget: 0, ..synthetic(SchedulerKind::Pbt) };
        assert!(matches!(zero.validate(), Err(RunError::Config(_))));
        let pop = RunConfig { population: 1, ..synthetic(SchedulerKind::Pbt) };
        assert!(pop.validate().is_err());
        let env = RunConfig { env: "moon".into(), ..RunConfig::default() };
        assert!(matches!(env.validate(), Err(RunError::Config(_))));
        let hb = RunConfig {
            hyperband: HyperbandOptions { b_min: 10, b_max: 5, eta: 3, n_iterations: 1 },
            ..synthetic(SchedulerKind::Hyperband)
        };
        assert!(hb.validate().is_err());
        assert_eq!(hb.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn random_search_logs_population_times_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { population: 4, budget: 3, ..synthetic(SchedulerKind::Random) };
        let log = run(&cfg, dir.path()).unwrap();
        assert_eq!(log.trials().count(), 12);
        assert_eq!(log.directives().count(), 0);
        assert!(dir.path().join(SCHEDULE_FILE).exists());
    }

    #[test]
    fn pbt_logs_one_directive_batch_per_interval() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic(SchedulerKind::Pbt);
        let log = run(&cfg, dir.path()).unwrap();
        assert_eq!(log.trials().count(), 6 * 30);
        let batches: HashSet<u64> = log.directives().map(|d| d.step).collect();
        assert_eq!(batches.len(), 6);
        assert_eq!(log.directives().count(), 6 * 6);
        let ids: HashSet<MemberId> = log.header.members.iter().copied().collect();
        for d in log.directives() {
            assert!(ids.contains(&d.member));
            if let Action::CloneFrom { donor, .. } = d.action {
                assert!(ids.contains(&donor));
            }
        }
        let summary = log.summary().unwrap();
        assert!(summary.schedule.is_valid());
    }

    #[test]
    fn hyperband_trials_match_plan() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic(SchedulerKind::Hyperband);
        let plan = cfg.plan().unwrap();
        let log = run(&cfg, dir.path()).unwrap();
        assert_eq!(log.trials().count() as u64, plan.total_trials());
        let summary = log.summary().unwrap();
        assert_eq!(summary.schedule.entries.len(), 1);
    }

    #[test]
    fn events_are_ordered_by_step_then_member() {
        let dir = tempfile::tempdir().unwrap();
        let log = run(&synthetic(SchedulerKind::PbtBt), dir.path()).unwrap();
        let phase = |r: &Record| match r {
            Record::Trial(_) => 0,
            Record::Rung(_) => 1,
            Record::Directive(_) => 2,
            _ => 3,
        };
        let member = |r: &Record| match r {
            Record::Trial(t) => t.member.0,
            Record::Directive(d) => d.member.0,
            _ => 0,
        };
        let keys: Vec<_> = log
            .records
            .iter()
            .filter_map(|r| r.step().map(|s| (s, phase(r), member(r))))
            .collect();
        assert!(keys.windows(2).all(|w| w[0] <= w[1]));
        assert!(log.directives().any(|d| matches!(d.action, Action::Backtrack { .. })));
    }

    /// Panics on the given trial, then behaves like its inner trainable.
    struct Crashy {
        inner: SyntheticTrainable,
        crash_at: u64,
    }

    impl Trainable for Crashy {
        fn space(&self) -> &ParamSpace {
            self.inner.space()
        }
        fn step(&mut self, config: &Configuration, seed: u64) -> Result<f64, TrainError> {
            if self.inner.trial_index() == self.crash_at {
                panic!("simulated worker crash");
            }
            self.inner.step(config, seed)
        }
        fn trial_index(&self) -> u64 {
            self.inner.trial_index()
        }
        fn score_window(&self) -> &crate::trainable::ScoreWindow {
            self.inner.score_window()
        }
        fn history_len(&self) -> usize {
            self.inner.history_len()
        }
        fn checkpoint(&self, copy_history: bool) -> TrainableCheckpoint {
            self.inner.checkpoint(copy_history)
        }
        fn restore(&mut self, c: &TrainableCheckpoint) -> Result<(), TrainError> {
            self.inner.restore(c)
        }
    }

    #[test]
    fn crashed_member_ranks_last_and_is_revived_by_a_clone() {
        let slot = |id, crash_at| Slot {
            id: MemberId(id),
            trainable: Box::new(Crashy {
                inner: SyntheticTrainable::new(DriftSurface::default()),
                crash_at,
            }),
            config: SyntheticTrainable::config(0.1 + 0.1 * id as f64),
            failed: false,
        };
        let mut slots: Vec<Slot> = (0..5).map(|i| slot(i, if i == 0 { 2 } else { u64::MAX })).collect();
        let results: Vec<IntervalResult> = slots.iter_mut().map(|s| run_trials(s, 0, 4, 0)).collect();
        let crashed = &results[0].trials;
        assert_eq!(crashed.len(), 3);
        assert!(crashed[2].failed && crashed[2].ret.is_none());
        assert!(crashed[2].error.as_deref().unwrap().contains("simulated worker crash"));
        assert!(slots[0].failed);
        assert_eq!(slot_score(&slots[0]), f64::NEG_INFINITY);
        // A failed member skips further intervals until it is cloned over.
        assert!(run_trials(&mut slots[0], 1, 4, 0).trials.is_empty());

        let scores: Vec<MemberScore> = slots
            .iter()
            .map(|s| MemberScore { id: s.id, score: slot_score(s), config: s.config.clone() })
            .collect();
        let opts = PbtOptions { population_size: 5, ..PbtOptions::default() };
        let directives = pbt_step(&scores, &opts, &synthetic_space(), 3).unwrap();
        assert!(matches!(directives[0].action, Action::CloneFrom { .. }));

        let Action::CloneFrom { donor, .. } = directives[0].action else { unreachable!() };
        let ckpt = slots[donor.0 as usize].trainable.checkpoint(true);
        slots[0].trainable.restore(&ckpt).unwrap();
        slots[0].failed = false;
        assert_eq!(slots[0].trainable.trial_index(), 4);
        // Past its crash trial now, so it trains normally.
        assert_eq!(run_trials(&mut slots[0], 1, 2, 0).trials.iter().filter(|t| !t.failed).count(), 2);
    }

    #[test]
    fn mismatched_resume_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic(SchedulerKind::Pbt);
        run_with(&cfg, dir.path(), RunControl { stop_after_barriers: Some(2) }).unwrap();
        let other = RunConfig { master_seed: 99, ..cfg };
        let err = run(&other, dir.path()).unwrap_err();
        assert!(matches!(err, RunError::ResumeMismatch { .. }));
        assert_eq!(err.exit_code(), 2);
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use tune_mbrl::mbrl::PetsOptions;
use tune_mbrl::orchestrator::{
    run, run_with, HyperbandOptions, RunConfig, RunControl, RunStatus, SchedulerKind, STATE_FILE,
    SYNTHETIC_ENV,
};
use tune_mbrl::runlog::{RunLog, Schedule, RUNLOG_FILE};
use tune_mbrl::schedulers::Action;
use tune_mbrl::trainable::DriftSurface;
use tune_mbrl::Group;

fn synthetic(scheduler: SchedulerKind) -> RunConfig {
    RunConfig {
        scheduler,
        env: SYNTHETIC_ENV.into(),
        population: 8,
        interval: Some(4),
        budget: 24,
        drift: DriftSurface {
            drift_period: 16,
            noise_std: 0.02,
            ..DriftSurface::default()
        },
        hyperband: HyperbandOptions {
            b_min: 2,
            b_max: 18,
            eta: 3,
            n_iterations: 2,
        },
        backtrack_every: 2,
        master_seed: 5,
        ..RunConfig::default()
    }
}

fn tiny_pets(scheduler: SchedulerKind) -> RunConfig {
    RunConfig {
        scheduler,
        space: "desk".into(),
        group: Group::ModelTrain,
        env: "pendulum".into(),
        env_horizon: Some(10),
        population: 4,
        interval: Some(2),
        budget: 4,
        pets: PetsOptions {
            ensemble_size: 2,
            hidden: vec![8, 8],
            particles: 2,
            oracle_dynamics: false,
        },
        master_seed: 1,
        ..RunConfig::default()
    }
}

fn log_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join(RUNLOG_FILE)).unwrap()
}

fn interrupted_then_resumed(cfg: &RunConfig, stop: u64) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let status = run_with(cfg, dir.path(), RunControl { stop_after_barriers: Some(stop) }).unwrap();
    assert!(matches!(status, RunStatus::Interrupted { barriers } if barriers == stop));
    run(cfg, dir.path()).unwrap();
    log_bytes(dir.path())
}

fn uninterrupted(cfg: &RunConfig) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    run(cfg, dir.path()).unwrap();
    log_bytes(dir.path())
}

#[test]
fn replay_is_byte_identical() {
    for kind in [SchedulerKind::Pbt, SchedulerKind::PbtBt, SchedulerKind::Hyperband, SchedulerKind::Random] {
        let cfg = synthetic(kind);
        assert_eq!(uninterrupted(&cfg), uninterrupted(&cfg), "{kind:?}");
    }
}

#[test]
fn worker_count_does_not_change_the_log() {
    let cfg = synthetic(SchedulerKind::Pbt);
    let parallel = RunConfig { workers: 4, ..cfg.clone() };
    assert_eq!(uninterrupted(&cfg), uninterrupted(&parallel));
}

#[test]
fn resume_after_any_barrier_matches_uninterrupted_run() {
    for kind in [SchedulerKind::Pbt, SchedulerKind::PbtBt, SchedulerKind::Hyperband] {
        let cfg = synthetic(kind);
        let reference = uninterrupted(&cfg);
        for stop in [1, 2, 4] {
            assert_eq!(interrupted_then_resumed(&cfg, stop), reference, "{kind:?} stop {stop}");
        }
    }
}

#[test]
fn resume_discards_a_partially_written_barrier() {
    let cfg = synthetic(SchedulerKind::PbtBt);
    let reference = uninterrupted(&cfg);
    let dir = tempfile::tempdir().unwrap();
    run_with(&cfg, dir.path(), RunControl { stop_after_barriers: Some(2) }).unwrap();
    // A crash mid-barrier leaves records past the persisted resume point.
    let mut f = fs::OpenOptions::new().append(true).open(dir.path().join(RUNLOG_FILE)).unwrap();
    f.write_all(b"{\"type\":\"trial\",\"step\":2,\"trunc").unwrap();
    drop(f);
    run(&cfg, dir.path()).unwrap();
    assert_eq!(log_bytes(dir.path()), reference);
}

#[test]
fn completed_run_is_not_repeated() {
    let cfg = synthetic(SchedulerKind::Pbt);
    let dir = tempfile::tempdir().unwrap();
    let first = run(&cfg, dir.path()).unwrap();
    let again = run(&cfg, dir.path()).unwrap();
    assert_eq!(first, again);
    assert!(dir.path().join(STATE_FILE).exists());
}

#[test]
fn pets_population_resumes_identically() {
    let cfg = tiny_pets(SchedulerKind::Pbt);
    let reference = uninterrupted(&cfg);
    assert_eq!(interrupted_then_resumed(&cfg, 1), reference);
    let log = RunLog::parse(std::str::from_utf8(&reference).unwrap()).unwrap();
    assert_eq!(log.trials().count(), 16);
    assert!(log.trials().all(|t| !t.failed && t.ret.is_some_and(f64::is_finite)));
}

#[test]
fn pets_hyperband_matches_budget_accounting() {
    let cfg = RunConfig {
        hyperband: HyperbandOptions {
            b_min: 1,
            b_max: 3,
            eta: 3,
            n_iterations: 1,
        },
        ..tiny_pets(SchedulerKind::Hyperband)
    };
    let plan = cfg.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = run(&cfg, dir.path()).unwrap();
    assert_eq!(log.trials().count() as u64, plan.total_trials());
    let promoted = log.directives().filter(|d| matches!(d.action, Action::Promote { .. })).count();
    assert_eq!(promoted as u64, plan.brackets[0].rungs[1].n_configs);
}

#[test]
fn summary_schedule_is_written_and_readable() {
    let cfg = synthetic(SchedulerKind::Pbt);
    let dir = tempfile::tempdir().unwrap();
    let log = run(&cfg, dir.path()).unwrap();
    let on_disk = Schedule::read_csv(dir.path().join("schedule.csv")).unwrap();
    let summary = log.summary().unwrap();
    assert_eq!(on_disk.entries.len(), summary.schedule.entries.len());
    for (a, b) in on_disk.entries.iter().zip(&summary.schedule.entries) {
        assert_eq!(a.trial, b.trial);
        assert!(a.config.same_values(&b.config));
    }
    let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 1 + 8 * 24);
}

use std::sync::Arc;

use tune_mbrl::confspace::{Group, SpaceFile};
use tune_mbrl::envs::Pendulum;
use tune_mbrl::mbrl::{PetsOptions, PetsTrainable};
use tune_mbrl::orchestrator::seed_tree;
use tune_mbrl::trainable::Trainable;

/// Return of the fifth trial (index 4) on the pendulum.
fn return_at_trial_four(seed: u64, oracle_dynamics: bool) -> f64 {
    let file = SpaceFile::load_named_or_path("desk").unwrap();
    let space = file.space(Group::CemOptimizer);
    let config = space.defaults();
    let options = PetsOptions { oracle_dynamics, ..PetsOptions::default() };
    let mut learner = PetsTrainable::new(
        Arc::new(Pendulum::default()),
        space,
        file.defaults(),
        options,
        seed_tree(seed, 0, u64::MAX),
    )
    .unwrap();
    let mut last = f64::NAN;
    for t in 0..5 {
        last = learner.step(&config, seed_tree(seed, 0, t)).unwrap();
    }
    last
}

#[test]
fn true_dynamics_outplan_an_early_learned_model() {
    let pairs: Vec<(f64, f64)> =
        (0..5).map(|s| (return_at_trial_four(s, true), return_at_trial_four(s, false))).collect();
    let wins = pairs.iter().filter(|(oracle, learned)| oracle > learned).count();
    assert!(wins >= 4, "oracle vs learned at trial 4: {pairs:?}");
}

//! PETS-style optimizee: a probabilistic ensemble learned from experience and
//! CEM model-predictive control, iterated one episode ("trial") at a time.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::confspace::{Configuration, ParamSpace};
use crate::dynamics::{
    GaussianEnsemble, ModelTrainHp, TrainReport, TransitionDataset, DEFAULT_ENSEMBLE_SIZE,
    DEFAULT_HIDDEN,
};
use crate::envs::{random_action, random_policy_return, Environment};
use crate::error::{CheckpointError, DynamicsError, SpaceError, TrainError};
use crate::planner::{mpc_act, ActionDistribution, CemConfig, OracleModel, DEFAULT_PARTICLES};
use crate::trainable::{ScoreWindow, Trainable, TrainableCheckpoint};

/// Mean return of the uniformly random policy on the default pendulum over
/// 100 episodes (seeds 0..100), frozen; `random_baseline` recomputes it.
pub const PENDULUM_RANDOM_BASELINE: f64 = -1_736.860_348_030_761_8;

/// Mean random-policy return over `episodes` seeded episodes.
pub fn random_baseline(env: &dyn Environment, episodes: u64) -> f64 {
    (0..episodes).map(|s| random_policy_return(env, s)).sum::<f64>() / episodes as f64
}

/// Fixed (untuned) structure of the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PetsOptions {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub particles: usize,
    /// Plan with the true dynamics instead of the learned model.
    #[serde(default)]
    pub oracle_dynamics: bool,
}

impl Default for PetsOptions {
    fn default() -> Self {
        PetsOptions {
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            hidden: vec![DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            particles: DEFAULT_PARTICLES,
            oracle_dynamics: false,
        }
    }
}

/// One PETS learner on one environment.
///
/// `space` holds the tuned parameters; every other hyperparameter comes from
/// `base`. Configuration changes apply from the next trial onward.
#[derive(Debug, Clone)]
pub struct PetsTrainable {
    env: Arc<dyn Environment>,
    space: ParamSpace,
    base: Configuration,
    options: PetsOptions,
    model: GaussianEnsemble,
    dataset: TransitionDataset,
    t: u64,
    returns: ScoreWindow,
    active: Configuration,
    last_seed: u64,
    last_report: TrainReport,
    last_actions: Vec<f64>,
}

impl PetsTrainable {
    /// `base` must supply every model-training and CEM hyperparameter.
    pub fn new(
        env: Arc<dyn Environment>,
        space: ParamSpace,
        base: Configuration,
        options: PetsOptions,
        model_seed: u64,
    ) -> Result<Self, TrainError> {
        let merged = base.merged_with(&space.defaults());
        if ModelTrainHp::from_config(&merged).is_none() || CemConfig::from_config(&merged).is_none() {
            return Err(TrainError::Validation(SpaceError::MissingParameter(
                "base configuration lacks model-training or CEM parameters".into(),
            )));
        }
        let model = GaussianEnsemble::new(
            env.state_dim(),
            env.action_dim(),
            options.ensemble_size,
            &options.hidden,
            model_seed,
        );
        let dataset = TransitionDataset::new(env.state_dim(), env.action_dim());
        let active = space.defaults();
        Ok(PetsTrainable {
            env,
            space,
            base,
            options,
            model,
            dataset,
            t: 0,
            returns: ScoreWindow::default(),
            active,
            last_seed: 0,
            last_report: TrainReport::default(),
            last_actions: Vec::new(),
        })
    }

    pub fn env(&self) -> &Arc<dyn Environment> {
        &self.env
    }

    pub fn model(&self) -> &GaussianEnsemble {
        &self.model
    }

    pub fn dataset(&self) -> &TransitionDataset {
        &self.dataset
    }

    pub fn active_config(&self) -> &Configuration {
        &self.active
    }

    /// Training report of the most recent trial (empty for trial 0).
    pub fn last_report(&self) -> &TrainReport {
        &self.last_report
    }

    /// Actions executed in the most recent trial, row-major.
    pub fn last_actions(&self) -> &[f64] {
        &self.last_actions
    }

    /// Runs one trial: retrain on all data, then one MPC episode (random
    /// actions on trial 0), appending its transitions.
    pub fn run_trial(&mut self, config: &Configuration, seed: u64) -> Result<f64, TrainError> {
        self.space.validate(config)?;
        let full = self.base.merged_with(config);
        let hp = ModelTrainHp::from_config(&full).expect("checked at construction");
        let mut cem = CemConfig::from_config(&full).expect("checked at construction");
        cem.particles = self.options.particles;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        self.last_report = TrainReport::default();
        if self.t > 0 && !self.options.oracle_dynamics {
            self.last_report = self
                .model
                .train(&self.dataset, &hp, &mut rng)
                .map_err(|e| match e {
                    DynamicsError::NonFiniteLoss { .. } => TrainError::NumericalOverflow(e.to_string()),
                    other => TrainError::Dynamics(other),
                })?;
        }

        let env = Arc::clone(&self.env);
        let bounds = env.action_bounds();
        let mut state = env.reset(rng.random());
        let mut dist = ActionDistribution::initial(bounds, cem.plan_horizon);
        let mut next = vec![0.0; env.state_dim()];
        let mut actions = Vec::with_capacity(env.horizon() * env.action_dim());
        let mut episode = TransitionDataset::new(env.state_dim(), env.action_dim());
        let mut ret = 0.0;
        for _ in 0..env.horizon() {
            let action = if self.t == 0 {
                random_action(bounds, &mut rng)
            } else {
                let plan_seed = rng.random();
                let (a, d) = if self.options.oracle_dynamics {
                    mpc_act(&OracleModel(env.as_ref()), env.as_ref(), &state, &cem, &dist, plan_seed)?
                } else {
                    mpc_act(&self.model, env.as_ref(), &state, &cem, &dist, plan_seed)?
                };
                dist = d;
                a
            };
            let r = env.reward(&state, &action);
            env.step_into(&state, &action, &mut next);
            if !r.is_finite() || next.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NumericalOverflow(format!(
                    "non-finite transition in trial {}",
                    self.t
                )));
            }
            episode.push(&state, &action, &next, r)?;
            actions.extend_from_slice(&action);
            ret += r;
            std::mem::swap(&mut state, &mut next);
        }

        self.dataset.begin_trial();
        for i in 0..episode.len() {
            self.dataset
                .push(episode.state(i), episode.action(i), episode.next_state(i), episode.reward(i))?;
        }
        self.last_actions = actions;
        self.returns.push(ret);
        self.t += 1;
        self.active = config.clone();
        self.last_seed = seed;
        Ok(ret)
    }
}

impl Trainable for PetsTrainable {
    fn space(&self) -> &ParamSpace {
        &self.space
    }

    fn step(&mut self, config: &Configuration, seed: u64) -> Result<f64, TrainError> {
        self.run_trial(config, seed)
    }

    fn trial_index(&self) -> u64 {
        self.t
    }

    fn score_window(&self) -> &ScoreWindow {
        &self.returns
    }

    fn history_len(&self) -> usize {
        self.dataset.len()
    }

    fn checkpoint(&self, copy_history: bool) -> TrainableCheckpoint {
        TrainableCheckpoint {
            model_state: self.model.to_bytes(),
            history: copy_history.then(|| self.dataset.to_bytes()),
            hyperparameters: self.active.clone(),
            trial_index: self.t,
            returns: self.returns.clone(),
            rng_state: self.last_seed.to_le_bytes().to_vec(),
        }
    }

    fn restore(&mut self, ckpt: &TrainableCheckpoint) -> Result<(), TrainError> {
        let model = GaussianEnsemble::from_bytes(&ckpt.model_state)?;
        if model.state_dim() != self.env.state_dim() || model.action_dim() != self.env.action_dim() {
            return Err(CheckpointError::Corrupt("model dimensions do not match the environment".into()).into());
        }
        let dataset = match &ckpt.history {
            Some(bytes) => Some(TransitionDataset::from_bytes(bytes)?),
            None => None,
        };
        let mut r = ByteReader::new(&ckpt.rng_state);
        let seed = r.u64()?;
        r.finish()?;
        self.model = model;
        if let Some(d) = dataset {
            self.dataset = d;
        }
        self.t = ckpt.trial_index;
        self.returns = ckpt.returns.clone();
        self.active = ckpt.hyperparameters.clone();
        self.last_seed = seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confspace::{Group, SpaceFile};
    use crate::envs::{Pendulum, PointPusher};

    fn desk() -> SpaceFile {
        SpaceFile::load_named_or_path("desk").unwrap()
    }

    fn small_options() -> PetsOptions {
        PetsOptions {
            ensemble_size: 2,
            hidden: vec![8, 8],
            particles: 2,
            oracle_dynamics: false,
        }
    }

    fn tiny_cem(space: &ParamSpace) -> Configuration {
        let mut c = space.defaults();
        c.set("cem_iterations", 2.0);
        c.set("cem_population_size", 20.0);
        c.set("plan_horizon", 5.0);
        c
    }

    fn learner(env: Arc<dyn Environment>, seed: u64) -> (PetsTrainable, Configuration) {
        let file = desk();
        let space = file.space(Group::CemOptimizer);
        let cfg = tiny_cem(&space);
        let mut base = file.defaults();
        base.set("training_epochs", 3.0);
        (PetsTrainable::new(env, space, base, small_options(), seed).unwrap(), cfg)
    }

    #[test]
    fn frozen_baseline_matches_monte_carlo() {
        let b = random_baseline(&Pendulum::default(), 100);
        assert!((b - PENDULUM_RANDOM_BASELINE).abs() < 1e-9, "{b:?}");
        assert!(b < -1000.0);
    }

    #[test]
    fn dataset_grows_by_horizon() {
        let (mut m, cfg) = learner(Arc::new(Pendulum::with_horizon(20)), 0);
        for k in 0..3u64 {
            m.step(&cfg, k).unwrap();
            assert_eq!(m.history_len(), (k as usize + 1) * 20);
            assert_eq!(m.dataset().n_trials(), k as usize + 1);
        }
        assert_eq!(m.trial_index(), 3);
        assert!(!m.last_report().epoch_nll.is_empty());
    }

    #[test]
    fn first_trial_is_random_and_bounded() {
        let (mut m, cfg) = learner(Arc::new(PointPusher::default()), 1);
        m.step(&cfg, 3).unwrap();
        assert!(m.last_report().epoch_nll.is_empty());
        let acts = m.last_actions();
        assert_eq!(acts.len(), 150 * 2);
        assert!(acts.iter().all(|a| (-1.0..=1.0).contains(a)));
        let mean = acts.iter().sum::<f64>() / acts.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn score_is_trailing_mean_of_returns() {
        let (mut m, cfg) = learner(Arc::new(Pendulum::with_horizon(10)), 2);
        let mut rets = Vec::new();
        for k in 0..5 {
            rets.push(m.step(&cfg, k).unwrap());
            let lo = rets.len().saturating_sub(3);
            let expect = rets[lo..].iter().sum::<f64>() / (rets.len() - lo) as f64;
            assert!((m.score().unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let (mut m, cfg) = learner(Arc::new(Pendulum::with_horizon(15)), 4);
            (0..3).map(|k| m.step(&cfg, 10 + k).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clone_directive_semantics() {
        let env: Arc<dyn Environment> = Arc::new(Pendulum::with_horizon(10));
        let (mut donor, cfg) = learner(Arc::clone(&env), 5);
        let (mut receiver, _) = learner(env, 6);
        for k in 0..3 {
            donor.step(&cfg, k).unwrap();
        }
        receiver.step(&cfg, 0).unwrap();

        let mut with = receiver.clone();
        with.restore(&donor.checkpoint(true)).unwrap();
        assert_eq!(with.history_len(), donor.history_len());
        assert_eq!(with.model(), donor.model());
        assert_eq!(with.trial_index(), 3);

        let mut without = receiver.clone();
        without.restore(&donor.checkpoint(false)).unwrap();
        assert_eq!(without.history_len(), 10);
        assert_eq!(without.model(), donor.model());
        assert_eq!(without.score().unwrap(), donor.score().unwrap());

        let bytes = receiver.checkpoint(true).to_bytes();
        let again = TrainableCheckpoint::from_bytes(&bytes).unwrap();
        let mut same = receiver.clone();
        same.restore(&again).unwrap();
        assert_eq!(same.checkpoint(true).to_bytes(), bytes);
    }

    #[test]
    fn rejects_foreign_configuration() {
        let (mut m, _) = learner(Arc::new(Pendulum::with_horizon(5)), 0);
        let mut bad = desk().space(Group::CemOptimizer).defaults();
        bad.set("learning_rate", 1e-3);
        assert!(matches!(m.step(&bad, 0), Err(TrainError::Validation(_))));
        assert_eq!(m.trial_index(), 0);
    }
}

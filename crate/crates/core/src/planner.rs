//! Cross-entropy-method model-predictive control.
//!
//! Action sequences are scored by trajectory sampling: each particle commits
//! to one ensemble member for its whole rollout, and rollouts sharing a member
//! are propagated together as one batch.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::confspace::Configuration;
use crate::dynamics::GaussianEnsemble;
use crate::envs::Environment;
use crate::error::PlannerError;

pub const DEFAULT_PARTICLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub plan_horizon: usize,
    pub population_size: usize,
    pub elites_ratio: f64,
    /// Weight kept on the previous distribution at each update.
    pub alpha: f64,
    pub iterations: usize,
    pub particles: usize,
}

impl CemConfig {
    /// Reads the CEM hyperparameters; `particles` is fixed, not tuned.
    pub fn from_config(config: &Configuration) -> Option<Self> {
        Some(CemConfig {
            plan_horizon: config.get("plan_horizon")? as usize,
            population_size: config.get("cem_population_size")? as usize,
            elites_ratio: config.get("cem_elites_ratio")?,
            alpha: config.get("cem_alpha")?,
            iterations: config.get("cem_iterations")? as usize,
            particles: DEFAULT_PARTICLES,
        })
    }

    pub fn elite_count(&self) -> usize {
        ((self.elites_ratio * self.population_size as f64).round() as usize)
            .max(1)
            .min(self.population_size)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidConfig(m.to_string()));
        if self.plan_horizon == 0 {
            return bad("plan_horizon must be positive");
        }
        if self.population_size == 0 {
            return bad("population_size must be positive");
        }
        if self.particles == 0 {
            return bad("particles must be positive");
        }
        if !(self.elites_ratio > 0.0 && self.elites_ratio <= 1.0) {
            return bad("elites_ratio must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over a `horizon x action_dim` action sequence (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub horizon: usize,
    pub action_dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ActionDistribution {
    /// Midpoint mean and variance `((high - low) / 4)^2` in every step.
    pub fn initial(bounds: &[(f64, f64)], horizon: usize) -> Self {
        let mut mean = Vec::with_capacity(horizon * bounds.len());
        let mut variance = Vec::with_capacity(horizon * bounds.len());
        for _ in 0..horizon {
            for &(lo, hi) in bounds {
                mean.push(0.5 * (lo + hi));
                variance.push(((hi - lo) / 4.0).powi(2));
            }
        }
        ActionDistribution {
            horizon,
            action_dim: bounds.len(),
            mean,
            variance,
        }
    }

    /// Warm start for the next control step: the mean is shifted forward one
    /// step (padded with the midpoint) and the variance is reset to its
    /// initial value, so a collapsed distribution can still explore.
    pub fn shifted(&self, bounds: &[(f64, f64)]) -> Self {
        let d = self.action_dim;
        let mut out = Self::initial(bounds, self.horizon);
        let keep = (self.horizon - 1) * d;
        out.mean[..keep].copy_from_slice(&self.mean[d..]);
        out
    }

    pub fn first_action(&self) -> &[f64] {
        &self.mean[..self.action_dim]
    }
}

/// Indices of the `k` best scores, best first; ties keep the lower index.
pub fn select_elites(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Runs CEM. `objective(sequences, scores)` scores `scores.len()` row-major
/// sequences; non-finite scores are treated as the worst possible.
pub fn cem_optimize<F>(
    mut objective: F,
    bounds: &[(f64, f64)],
    cfg: &CemConfig,
    init: &ActionDistribution,
    seed: u64,
) -> Result<ActionDistribution, PlannerError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    cfg.validate()?;
    let d = bounds.len();
    if init.action_dim != d || init.mean.len() != init.horizon * d || init.variance.len() != init.mean.len() {
        return Err(PlannerError::InvalidConfig(
            "initial distribution does not match the action bounds".into(),
        ));
    }
    if cfg.alpha == 1.0 && init.variance.iter().all(|&v| v == 0.0) {
        return Err(PlannerError::DegenerateVariance);
    }
    let len = init.mean.len();
    let pop = cfg.population_size;
    let k = cfg.elite_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = init.clone();
    let mut samples = vec![0.0; pop * len];
    let mut scores = vec![0.0; pop];
    for _ in 0..cfg.iterations {
        let std: Vec<f64> = dist.variance.iter().map(|v| v.max(0.0).sqrt()).collect();
        for row in samples.chunks_mut(len) {
            for (j, x) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let (lo, hi) = bounds[j % d];
                *x = (dist.mean[j] + std[j] * z).clamp(lo, hi);
            }
        }
        objective(&samples, &mut scores);
        for s in scores.iter_mut() {
            if !s.is_finite() {
                *s = f64::NEG_INFINITY;
            }
        }
        let elites = select_elites(&scores, k);
        let kf = k as f64;
        for j in 0..len {
            let m = elites.iter().map(|&e| samples[e * len + j]).sum::<f64>() / kf;
            let v = elites
                .iter()
                .map(|&e| (samples[e * len + j] - m).powi(2))
                .sum::<f64>()
                / kf;
            dist.mean[j] = cfg.alpha * dist.mean[j] + (1.0 - cfg.alpha) * m;
            dist.variance[j] = cfg.alpha * dist.variance[j] + (1.0 - cfg.alpha) * v;
        }
    }
    Ok(dist)
}

/// A (possibly stochastic) one-step dynamics model usable for planning.
pub trait TransitionModel: Sync {
    fn n_members(&self) -> usize;

    /// Samples next states for `n` row-major `(state, action)` pairs under `member`.
    fn sample_next(
        &self,
        member: usize,
        states: &[f64],
        actions: &[f64],
        n: usize,
        rng: &mut ChaCha8Rng,
        next: &mut [f64],
    );
}

impl TransitionModel for GaussianEnsemble {
    fn n_members(&self) -> usize {
        self.ensemble_size()
    }

    fn sample_next(
        &self,
        member: usize,
        states: &[f64],
        actions: &[f64],
        n: usize,
        rng: &mut ChaCha8Rng,
        next: &mut [f64],
    ) {
        let sd = self.state_dim();
        let mut var = vec![0.0; n * sd];
        self.predict_batch(member, states, actions, n, next, &mut var);
        for ((x, &s), &v) in next.iter_mut().zip(&states[..n * sd]).zip(&var) {
            let z: f64 = rng.sample(StandardNormal);
            *x = s + *x + v.sqrt() * z;
        }
    }
}

/// The environment's own dynamics as a single-member noiseless model.
#[derive(Debug, Clone, Copy)]
pub struct OracleModel<'a>(pub &'a dyn Environment);

impl TransitionModel for OracleModel<'_> {
    fn n_members(&self) -> usize {
        1
    }

    fn sample_next(
        &self,
        _member: usize,
        states: &[f64],
        actions: &[f64],
        n: usize,
        _rng: &mut ChaCha8Rng,
        next: &mut [f64],
    ) {
        let (sd, ad) = (self.0.state_dim(), self.0.action_dim());
        for i in 0..n {
            self.0.step_into(
                &states[i * sd..(i + 1) * sd],
                &actions[i * ad..(i + 1) * ad],
                &mut next[i * sd..(i + 1) * sd],
            );
        }
    }
}

/// Wraps a model and counts single-transition calls.
#[derive(Debug)]
pub struct CountingModel<M> {
    pub inner: M,
    calls: AtomicU64,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: TransitionModel> TransitionModel for CountingModel<M> {
    fn n_members(&self) -> usize {
        self.inner.n_members()
    }

    fn sample_next(
        &self,
        member: usize,
        states: &[f64],
        actions: &[f64],
        n: usize,
        rng: &mut ChaCha8Rng,
        next: &mut [f64],
    ) {
        self.calls.fetch_add(n as u64, Ordering::Relaxed);
        self.inner.sample_next(member, states, actions, n, rng, next);
    }
}

/// Expected return of each of `scores.len()` sequences from `state`,
/// averaged over `particles` trajectory samples. Non-finite rollouts score
/// negative infinity.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sequences<M: TransitionModel + ?Sized>(
    model: &M,
    env: &dyn Environment,
    state: &[f64],
    sequences: &[f64],
    horizon: usize,
    particles: usize,
    rng: &mut ChaCha8Rng,
    scores: &mut [f64],
) {
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let n_seq = scores.len();
    let members = model.n_members();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); members];
    for i in 0..n_seq {
        for _ in 0..particles {
            groups[rng.random_range(0..members)].push(i);
        }
    }
    let mut totals = vec![0.0; n_seq];
    for (member, rows) in groups.iter().enumerate() {
        let n = rows.len();
        if n == 0 {
            continue;
        }
        let mut s: Vec<f64> = state.iter().copied().cycle().take(n * sd).collect();
        let mut next = vec![0.0; n * sd];
        let mut a = vec![0.0; n * ad];
        let mut ret = vec![0.0; n];
        for t in 0..horizon {
            for (r, &i) in rows.iter().enumerate() {
                let off = (i * horizon + t) * ad;
                a[r * ad..(r + 1) * ad].copy_from_slice(&sequences[off..off + ad]);
            }
            for r in 0..n {
                ret[r] += env.reward(&s[r * sd..(r + 1) * sd], &a[r * ad..(r + 1) * ad]);
            }
            if t + 1 < horizon {
                model.sample_next(member, &s, &a, n, rng, &mut next);
                std::mem::swap(&mut s, &mut next);
            }
        }
        for (r, &i) in rows.iter().enumerate() {
            totals[i] += ret[r];
        }
    }
    for (score, total) in scores.iter_mut().zip(totals) {
        let mean = total / particles as f64;
        *score = if mean.is_finite() { mean } else { f64::NEG_INFINITY };
    }
}

/// Single-sequence form of [`evaluate_sequences`].
pub fn evaluate_sequence<M: TransitionModel + ?Sized>(
    model: &M,
    env: &dyn Environment,
    state: &[f64],
    actions: &[f64],
    particles: usize,
    seed: u64,
) -> f64 {
    let horizon = actions.len() / env.action_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score = [0.0];
    evaluate_sequences(model, env, state, actions, horizon, particles, &mut rng, &mut score);
    score[0]
}

/// Plans from `state` and returns the first action of the optimized mean,
/// clipped to bounds, with the final distribution for warm-starting.
///
/// A `previous` distribution of a different horizon (the horizon is a
/// hyperparameter and may change between trials) is replaced by the initial one.
pub fn mpc_act<M: TransitionModel + ?Sized>(
    model: &M,
    env: &dyn Environment,
    state: &[f64],
    cfg: &CemConfig,
    previous: &ActionDistribution,
    seed: u64,
) -> Result<(Vec<f64>, ActionDistribution), PlannerError> {
    let bounds = env.action_bounds();
    let init = if previous.horizon == cfg.plan_horizon && previous.action_dim == bounds.len() {
        previous.shifted(bounds)
    } else {
        ActionDistribution::initial(bounds, cfg.plan_horizon)
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let dist = cem_optimize(
        |seqs, scores| {
            evaluate_sequences(
                model,
                env,
                state,
                seqs,
                cfg.plan_horizon,
                cfg.particles,
                &mut eval_rng,
                scores,
            )
        },
        bounds,
        cfg,
        &init,
        seed,
    )?;
    let mut action = dist.first_action().to_vec();
    env.clip_action(&mut action);
    Ok((action, dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Pendulum, PointPusher};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn quad_cfg() -> CemConfig {
        CemConfig {
            plan_horizon: 1,
            population_size: 100,
            elites_ratio: 0.1,
            alpha: 0.1,
            iterations: 8,
            particles: 1,
        }
    }

    fn quadratic(seqs: &[f64], scores: &mut [f64]) {
        for (s, x) in scores.iter_mut().zip(seqs) {
            *s = -(x - 2.0).powi(2);
        }
    }

    #[test]
    fn elite_count_rounds() {
        let mut c = quad_cfg();
        c.population_size = 500;
        assert_eq!(c.elite_count(), 50);
        c.population_size = 3;
        c.elites_ratio = 0.01;
        assert_eq!(c.elite_count(), 1);
        c.elites_ratio = 1.0;
        assert_eq!(c.elite_count(), 3);
    }

    #[test]
    fn cem_finds_quadratic_optimum() {
        let bounds = [(-5.0, 5.0)];
        let init = ActionDistribution::initial(&bounds, 1);
        let hits = (0..100)
            .filter(|&seed| {
                let d = cem_optimize(quadratic, &bounds, &quad_cfg(), &init, seed).unwrap();
                (d.mean[0] - 2.0).abs() < 0.1
            })
            .count();
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn full_retention_leaves_init() {
        let bounds = [(-5.0, 5.0)];
        let init = ActionDistribution::initial(&bounds, 3);
        let cfg = CemConfig { alpha: 1.0, plan_horizon: 3, ..quad_cfg() };
        let out = cem_optimize(|_, s| s.fill(0.0), &bounds, &cfg, &init, 0).unwrap();
        assert_eq!(out, init);
        let mut flat = init.clone();
        flat.variance.fill(0.0);
        assert_eq!(
            cem_optimize(|_, s| s.fill(0.0), &bounds, &cfg, &flat, 0),
            Err(PlannerError::DegenerateVariance)
        );
    }

    #[test]
    fn full_replacement_gives_sample_mean() {
        let bounds = [(-5.0, 5.0), (-1.0, 1.0)];
        let init = ActionDistribution::initial(&bounds, 4);
        let cfg = CemConfig {
            alpha: 0.0,
            elites_ratio: 1.0,
            iterations: 1,
            population_size: 37,
            plan_horizon: 4,
            particles: 1,
        };
        let mut seen = Vec::new();
        let out = cem_optimize(
            |seqs, s| {
                seen = seqs.to_vec();
                for (i, v) in s.iter_mut().enumerate() {
                    *v = i as f64;
                }
            },
            &bounds,
            &cfg,
            &init,
            3,
        )
        .unwrap();
        let len = 8;
        for j in 0..len {
            let m: f64 = seen.chunks(len).map(|r| r[j]).sum::<f64>() / 37.0;
            assert!((out.mean[j] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_scores_rank_last() {
        let scores = [1.0, f64::NEG_INFINITY, 3.0, 2.0];
        assert_eq!(select_elites(&scores, 2), vec![2, 3]);
        let bounds = [(-5.0, 5.0)];
        let init = ActionDistribution::initial(&bounds, 1);
        let d = cem_optimize(
            |seqs, s| {
                for (v, x) in s.iter_mut().zip(seqs) {
                    *v = if *x > 3.0 { f64::NAN } else { -(x - 2.0).powi(2) };
                }
            },
            &bounds,
            &quad_cfg(),
            &init,
            1,
        )
        .unwrap();
        assert!((d.mean[0] - 2.0).abs() < 0.2);
    }

    proptest! {
        #[test]
        fn elites_dominate_non_elites(scores in prop::collection::vec(-1e3f64..1e3, 1..60), frac in 0.01f64..1.0) {
            let k = ((frac * scores.len() as f64).round() as usize).max(1).min(scores.len());
            let elites = select_elites(&scores, k);
            let worst = elites.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in 0..scores.len() {
                if !elites.contains(&i) {
                    prop_assert!(scores[i] <= worst);
                }
            }
        }
    }

    #[test]
    fn oracle_rollout_matches_environment() {
        let env = Pendulum::default();
        let s0 = Pendulum::state_from_angle(PI, 0.0);
        let horizon = 30;
        let actions = vec![0.7; horizon];
        let mut s = s0.clone();
        let mut expect = 0.0;
        for a in &actions {
            expect += env.reward(&s, &[*a]);
            s = env.step(&s, &[*a]);
        }
        let got = evaluate_sequence(&OracleModel(&env), &env, &s0, &actions, 5, 0);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        let zeros = vec![0.0; horizon];
        let hanging = evaluate_sequence(&OracleModel(&env), &env, &s0, &zeros, 5, 0);
        assert!((hanging - -(PI * PI) * horizon as f64).abs() < 1e-9);
        let one = evaluate_sequence(&OracleModel(&env), &env, &s0, &[1.5], 3, 0);
        assert_eq!(one, env.reward(&s0, &[1.5]));
    }

    /// Pendulum with every reward raised by a constant.
    #[derive(Debug)]
    struct Shifted(Pendulum, f64);

    impl Environment for Shifted {
        fn name(&self) -> &str {
            "shifted"
        }
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn action_bounds(&self) -> &[(f64, f64)] {
            self.0.action_bounds()
        }
        fn horizon(&self) -> usize {
            self.0.horizon()
        }
        fn n_trials(&self) -> usize {
            self.0.n_trials()
        }
        fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
            self.0.reward(s, a) + self.1
        }
        fn step_into(&self, s: &[f64], a: &[f64], next: &mut [f64]) {
            self.0.step_into(s, a, next)
        }
        fn reset(&self, seed: u64) -> Vec<f64> {
            self.0.reset(seed)
        }
    }

    #[test]
    fn reward_shift_adds_constant_and_keeps_plan() {
        let base = Pendulum::default();
        let shifted = Shifted(Pendulum::default(), 3.5);
        let ens = GaussianEnsemble::new(3, 1, 3, &[8, 8], 1);
        let s0 = base.reset(4);
        let h = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seqs: Vec<f64> = (0..10 * h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        evaluate_sequences(&ens, &base, &s0, &seqs, h, 5, &mut ChaCha8Rng::seed_from_u64(9), &mut a);
        evaluate_sequences(&ens, &shifted, &s0, &seqs, h, 5, &mut ChaCha8Rng::seed_from_u64(9), &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 3.5 * h as f64).abs() < 1e-9);
        }
        let cfg = CemConfig { plan_horizon: h, population_size: 30, elites_ratio: 0.2, alpha: 0.1, iterations: 3, particles: 5 };
        let init = ActionDistribution::initial(base.action_bounds(), h);
        let (act_a, _) = mpc_act(&ens, &base, &s0, &cfg, &init, 5).unwrap();
        let (act_b, _) = mpc_act(&ens, &shifted, &s0, &cfg, &init, 5).unwrap();
        assert!((act_a[0] - act_b[0]).abs() < 1e-9);
    }

    #[test]
    fn model_calls_scale_with_population_particles_horizon() {
        let env = PointPusher::default();
        let counted = CountingModel::new(OracleModel(&env));
        let cfg = CemConfig { plan_horizon: 7, population_size: 13, elites_ratio: 0.2, alpha: 0.1, iterations: 3, particles: 4 };
        let init = ActionDistribution::initial(env.action_bounds(), 7);
        let s0 = env.reset(0);
        mpc_act(&counted, &env, &s0, &cfg, &init, 0).unwrap();
        // The last step's reward needs no further transition.
        assert_eq!(counted.calls(), 3 * 13 * 4 * 6);
    }

    #[test]
    fn deterministic_ensemble_particles_agree() {
        let env = Pendulum::default();
        let mut ens = GaussianEnsemble::new(3, 1, 1, &[8, 8], 0);
        // Force every log-variance to its floor so rollouts are (nearly) noiseless.
        let n = ens.n_params();
        let out_bias = &mut ens.params_mut(0)[n - 6..];
        out_bias[3..].fill(-1e3);
        let s0 = env.reset(1);
        let acts = vec![0.3; 5];
        let one = evaluate_sequence(&ens, &env, &s0, &acts, 1, 0);
        let many = evaluate_sequence(&ens, &env, &s0, &acts, 5, 0);
        assert!((one - many).abs() < 1e-2 * one.abs().max(1.0), "{one} vs {many}");
    }

    #[test]
    fn mpc_actions_are_bounded_and_deterministic() {
        let env = Pendulum::default();
        let ens = GaussianEnsemble::new(3, 1, 2, &[8, 8], 3);
        let cfg = CemConfig { plan_horizon: 3, population_size: 8, elites_ratio: 0.25, alpha: 0.1, iterations: 2, particles: 2 };
        let init = ActionDistribution::initial(env.action_bounds(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..1000 {
            let s = Pendulum::state_from_angle(rng.random_range(-PI..PI), rng.random_range(-8.0..8.0));
            let (a, d) = mpc_act(&ens, &env, &s, &cfg, &init, i).unwrap();
            assert!((-2.0..=2.0).contains(&a[0]));
            assert_eq!(d.horizon, 3);
            if i % 100 == 0 {
                assert_eq!(mpc_act(&ens, &env, &s, &cfg, &init, i).unwrap().0, a);
            }
        }
    }

    #[test]
    fn oracle_plans_beat_doing_nothing() {
        let env = Pendulum::default();
        let oracle = OracleModel(&env);
        let cfg = CemConfig { plan_horizon: 25, population_size: 100, elites_ratio: 0.1, alpha: 0.1, iterations: 5, particles: 1 };
        let mut dist = ActionDistribution::initial(env.action_bounds(), 25);
        let mut s = env.reset(0);
        let zeros = vec![0.0; 25];
        let steps = 100;
        let mut wins = 0;
        for t in 0..steps {
            let (a, d) = mpc_act(&oracle, &env, &s, &cfg, &dist, t).unwrap();
            let planned = evaluate_sequence(&oracle, &env, &s, &d.mean, 1, 0);
            let idle = evaluate_sequence(&oracle, &env, &s, &zeros, 1, 0);
            wins += (planned >= idle) as usize;
            s = env.step(&s, &a);
            dist = d;
        }
        assert!(wins * 100 >= 95 * steps as usize, "{wins}/{steps}");
    }

    #[test]
    fn shift_pads_with_initial_step() {
        let bounds = [(-2.0, 2.0)];
        let mut d = ActionDistribution::initial(&bounds, 3);
        d.mean = vec![1.0, 2.0, 3.0];
        d.variance = vec![0.1, 0.2, 0.3];
        let s = d.shifted(&bounds);
        assert_eq!(s.mean, vec![2.0, 3.0, 0.0]);
        assert_eq!(s.variance, vec![1.0, 1.0, 1.0]);
    }
}

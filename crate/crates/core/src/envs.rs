//! Deterministic toy environments with known reward functions.
//!
//! Environments are pure: `step` and `reward` map (state, action) to a value
//! with no hidden state, so planners may use them as exact models.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait Environment: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per-dimension `(low, high)` action bounds.
    fn action_bounds(&self) -> &[(f64, f64)];
    /// Steps per trial.
    fn horizon(&self) -> usize;
    /// Default number of trials per run.
    fn n_trials(&self) -> usize;
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn step_into(&self, state: &[f64], action: &[f64], next: &mut [f64]);
    fn reset(&self, seed: u64) -> Vec<f64>;

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; self.state_dim()];
        self.step_into(state, action, &mut next);
        next
    }

    fn clip_action(&self, action: &mut [f64]) {
        for (a, &(lo, hi)) in action.iter_mut().zip(self.action_bounds()) {
            *a = a.clamp(lo, hi);
        }
    }

    fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>
    where
        Self: Sized,
    {
        random_action(self.action_bounds(), rng)
    }
}

pub fn random_action<R: Rng + ?Sized>(bounds: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
        .collect()
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum; `theta = 0` is upright. State `(cos, sin, theta_dot)`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_speed: f64,
    pub horizon: usize,
    pub n_trials: usize,
    bounds: [(f64, f64); 1],
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum {
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_speed: 8.0,
            horizon: 200,
            n_trials: 30,
            bounds: [(-2.0, 2.0)],
        }
    }
}

impl Pendulum {
    pub fn with_horizon(horizon: usize) -> Self {
        Pendulum {
            horizon,
            ..Self::default()
        }
    }

    pub fn state_from_angle(theta: f64, theta_dot: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), theta_dot]
    }
}

pub fn pendulum_swingup() -> Pendulum {
    Pendulum::default()
}

impl Environment for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_trials(&self) -> usize {
        self.n_trials
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let theta = wrap_angle(s[1].atan2(s[0]));
        let u = a[0].clamp(self.bounds[0].0, self.bounds[0].1);
        -(theta * theta + 0.1 * s[2] * s[2] + 0.001 * u * u)
    }

    fn step_into(&self, s: &[f64], a: &[f64], next: &mut [f64]) {
        let theta = s[1].atan2(s[0]);
        let u = a[0].clamp(self.bounds[0].0, self.bounds[0].1);
        let accel = 3.0 * self.gravity / (2.0 * self.length) * theta.sin()
            + 3.0 / (self.mass * self.length * self.length) * u;
        let theta_dot = (s[2] + accel * self.dt).clamp(-self.max_speed, self.max_speed);
        let theta = theta + theta_dot * self.dt;
        next[0] = theta.cos();
        next[1] = theta.sin();
        next[2] = theta_dot;
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = PI + rng.random_range(-0.05..0.05);
        let theta_dot = rng.random_range(-0.05..0.05);
        Pendulum::state_from_angle(theta, theta_dot)
    }
}

/// Point-mass robot pushing a puck toward a fixed goal in the plane.
///
/// State: robot position (2), robot velocity (2), puck position (2), puck
/// velocity (2). Whenever the robot is within `contact_radius` of the puck and
/// closing in, the normal component of their relative velocity is handed to
/// the puck.
#[derive(Debug, Clone)]
pub struct PointPusher {
    pub dt: f64,
    pub robot_damping: f64,
    pub puck_friction: f64,
    pub contact_radius: f64,
    pub goal: [f64; 2],
    pub horizon: usize,
    pub n_trials: usize,
    bounds: [(f64, f64); 2],
}

impl Default for PointPusher {
    fn default() -> Self {
        PointPusher {
            dt: 0.1,
            robot_damping: 0.9,
            puck_friction: 0.8,
            contact_radius: 0.1,
            goal: [0.5, 0.3],
            horizon: 150,
            n_trials: 40,
            bounds: [(-1.0, 1.0), (-1.0, 1.0)],
        }
    }
}

pub fn point_pusher() -> PointPusher {
    PointPusher::default()
}

fn norm2(x: f64, y: f64) -> f64 {
    (x * x + y * y).sqrt()
}

impl Environment for PointPusher {
    fn name(&self) -> &str {
        "pusher2d"
    }

    fn state_dim(&self) -> usize {
        8
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_trials(&self) -> usize {
        self.n_trials
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let ux = a[0].clamp(-1.0, 1.0);
        let uy = a[1].clamp(-1.0, 1.0);
        let to_goal = norm2(s[4] - self.goal[0], s[5] - self.goal[1]);
        let to_puck = norm2(s[0] - s[4], s[1] - s[5]);
        -(to_goal + 0.1 * to_puck + 0.01 * (ux * ux + uy * uy))
    }

    fn step_into(&self, s: &[f64], a: &[f64], next: &mut [f64]) {
        let u = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let mut rv = [
            self.robot_damping * s[2] + u[0] * self.dt,
            self.robot_damping * s[3] + u[1] * self.dt,
        ];
        let r = [s[0] + rv[0] * self.dt, s[1] + rv[1] * self.dt];
        let mut pv = [self.puck_friction * s[6], self.puck_friction * s[7]];
        let (dx, dy) = (s[4] - r[0], s[5] - r[1]);
        let dist = norm2(dx, dy);
        if dist < self.contact_radius && dist > 0.0 {
            let n = [dx / dist, dy / dist];
            let closing = (rv[0] - pv[0]) * n[0] + (rv[1] - pv[1]) * n[1];
            if closing > 0.0 {
                for k in 0..2 {
                    pv[k] += closing * n[k];
                    rv[k] -= closing * n[k];
                }
            }
        }
        next[0] = r[0];
        next[1] = r[1];
        next[2] = rv[0];
        next[3] = rv[1];
        next[4] = s[4] + pv[0] * self.dt;
        next[5] = s[5] + pv[1] * self.dt;
        next[6] = pv[0];
        next[7] = pv[1];
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = || rng.random_range(-0.05..0.05);
        vec![
            -0.4 + jitter(),
            -0.2 + jitter(),
            0.0,
            0.0,
            0.0 + jitter(),
            0.0 + jitter(),
            0.0,
            0.0,
        ]
    }
}

pub const ENV_NAMES: [&str; 2] = ["pendulum", "pusher2d"];

/// Registry used by the CLI.
pub fn make_env(name: &str) -> Option<Arc<dyn Environment>> {
    match name {
        "pendulum" => Some(Arc::new(pendulum_swingup())),
        "pusher2d" => Some(Arc::new(point_pusher())),
        _ => None,
    }
}

/// Episode return of the uniformly random policy.
pub fn random_policy_return(env: &dyn Environment, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a2d);
    let mut state = env.reset(seed);
    let mut next = vec![0.0; env.state_dim()];
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let a = random_action(env.action_bounds(), &mut rng);
        total += env.reward(&state, &a);
        env.step_into(&state, &a, &mut next);
        std::mem::swap(&mut state, &mut next);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_upright_is_a_fixed_point() {
        let env = pendulum_swingup();
        let s = Pendulum::state_from_angle(0.0, 0.0);
        assert_eq!(env.reward(&s, &[0.0]), 0.0);
        assert_eq!(env.step(&s, &[0.0]), s);
    }

    #[test]
    fn pendulum_hanging_reward() {
        let env = pendulum_swingup();
        let s = Pendulum::state_from_angle(PI, 0.0);
        assert!((env.reward(&s, &[0.0]) + PI * PI).abs() < 1e-12);
        assert!((env.reward(&s, &[0.0]) + 9.8696).abs() < 1e-4);
    }

    #[test]
    fn pendulum_max_torque_spins_up() {
        let env = pendulum_swingup();
        let mut s = Pendulum::state_from_angle(PI, 0.0);
        let mut speeds = vec![s[2].abs()];
        for _ in 0..20 {
            s = env.step(&s, &[2.0]);
            speeds.push(s[2].abs());
        }
        for w in speeds[..6].windows(2) {
            assert!(w[1] > w[0], "{speeds:?}");
        }
    }

    #[test]
    fn pusher_goal_reward_and_statics() {
        let env = point_pusher();
        let g = env.goal;
        let s = [g[0], g[1], 0.0, 0.0, g[0], g[1], 0.0, 0.0];
        assert_eq!(env.reward(&s, &[0.0, 0.0]), 0.0);
        let s = [-0.3, 0.2, 0.0, 0.0, 0.1, -0.1, 0.0, 0.0];
        assert_eq!(env.step(&s, &[0.0, 0.0]), s.to_vec());
    }

    #[test]
    fn pusher_contact_pushes_along_normal() {
        let env = point_pusher();
        let s = [-0.15, 0.03, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let next = env.step(&s, &[0.0, 0.0]);
        let r = [next[0], next[1]];
        let n = [0.0 - r[0], 0.0 - r[1]];
        let d = [next[4], next[5]];
        let cross = n[0] * d[1] - n[1] * d[0];
        let dot = n[0] * d[0] + n[1] * d[1];
        assert!(dot > 0.0, "puck should move away from the robot");
        assert!(cross.abs() < 1e-12 * dot.abs().max(1.0), "cross {cross}");
    }

    #[test]
    fn rewards_are_bounded_by_zero() {
        let envs: [Arc<dyn Environment>; 2] = [Arc::new(pendulum_swingup()), Arc::new(point_pusher())];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for env in envs {
            for _ in 0..1000 {
                let s: Vec<f64> = (0..env.state_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let a = random_action(env.action_bounds(), &mut rng);
                assert!(env.reward(&s, &a) <= 0.0);
                assert_eq!(env.step(&s, &a), env.step(&s, &a));
            }
        }
    }

    #[test]
    fn registry_knows_both_envs() {
        for name in ENV_NAMES {
            assert_eq!(make_env(name).unwrap().name(), name);
        }
        assert!(make_env("hopper").is_none());
    }
}

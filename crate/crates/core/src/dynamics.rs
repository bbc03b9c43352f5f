//! Probabilistic ensemble dynamics model.
//!
//! Each member is a feedforward network mapping a normalized `(state, action)`
//! to the mean and log-variance of a diagonal Gaussian over the normalized
//! state delta. Members are trained on independent bootstrap resamples by
//! minimizing Gaussian negative log-likelihood with AdamW.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::confspace::Configuration;
use crate::error::{CheckpointError, DynamicsError};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 1.0;
pub const MIN_STD: f64 = 1e-8;
pub const BATCH_SIZE: usize = 32;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const DEFAULT_HIDDEN: usize = 64;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const MODEL_STATE_VERSION: u16 = 1;

/// Diagonal Gaussian NLL summed over dimensions.
pub fn gaussian_nll(mean: &[f64], log_var: &[f64], target: &[f64]) -> Result<f64, DynamicsError> {
    if mean.len() != target.len() {
        return Err(DynamicsError::DimensionMismatch {
            expected: target.len(),
            got: mean.len(),
        });
    }
    if log_var.len() != target.len() {
        return Err(DynamicsError::DimensionMismatch {
            expected: target.len(),
            got: log_var.len(),
        });
    }
    Ok(mean
        .iter()
        .zip(log_var)
        .zip(target)
        .map(|((&m, &lv), &t)| HALF_LN_2PI + 0.5 * lv + 0.5 * (t - m) * (t - m) * (-lv).exp())
        .sum())
}

/// Smooth bounded activation `x / sqrt(1 + x^2)`.
#[inline]
fn act(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

#[inline]
fn act_grad(x: f64) -> f64 {
    let r = 1.0 / (1.0 + x * x).sqrt();
    r * r * r
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps an unbounded network output into `(LOG_VAR_MIN, LOG_VAR_MAX)`.
#[inline]
pub fn squash_log_var(raw: f64) -> f64 {
    LOG_VAR_MIN + (LOG_VAR_MAX - LOG_VAR_MIN) * sigmoid(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainHp {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub training_epochs: usize,
}

impl ModelTrainHp {
    /// Reads `learning_rate`, `weight_decay` and `training_epochs`.
    pub fn from_config(config: &Configuration) -> Option<Self> {
        Some(ModelTrainHp {
            learning_rate: config.get("learning_rate")?,
            weight_decay: config.get("weight_decay")?,
            training_epochs: config.get("training_epochs")? as usize,
        })
    }
}

/// Append-only transition store; trial boundaries are recorded so that
/// analyses can window by trial.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
    rewards: Vec<f64>,
    trial_starts: Vec<usize>,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        TransitionDataset {
            state_dim,
            action_dim,
            ..Default::default()
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Marks the start of a new trial at the current end of the dataset.
    pub fn begin_trial(&mut self) {
        self.trial_starts.push(self.len());
    }

    pub fn n_trials(&self) -> usize {
        self.trial_starts.len()
    }

    pub fn push(
        &mut self,
        state: &[f64],
        action: &[f64],
        next_state: &[f64],
        reward: f64,
    ) -> Result<(), DynamicsError> {
        for (v, d) in [
            (state, self.state_dim),
            (action, self.action_dim),
            (next_state, self.state_dim),
        ] {
            if v.len() != d {
                return Err(DynamicsError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        if self.trial_starts.is_empty() {
            self.trial_starts.push(0);
        }
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.next_states.extend_from_slice(next_state);
        self.rewards.push(reward);
        Ok(())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    /// Records belonging to the last `trials` trials (all of them if fewer exist).
    pub fn last_trials(&self, trials: usize) -> TransitionDataset {
        let n = self.trial_starts.len();
        let first_trial = n.saturating_sub(trials);
        let start = self.trial_starts.get(first_trial).copied().unwrap_or(0);
        self.slice_from(start, &self.trial_starts[first_trial.min(n)..])
    }

    fn slice_from(&self, start: usize, starts: &[usize]) -> TransitionDataset {
        TransitionDataset {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[start * self.state_dim..].to_vec(),
            actions: self.actions[start * self.action_dim..].to_vec(),
            next_states: self.next_states[start * self.state_dim..].to_vec(),
            rewards: self.rewards[start..].to_vec(),
            trial_starts: starts.iter().map(|&s| s - start).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        w.f64s(&self.states);
        w.f64s(&self.actions);
        w.f64s(&self.next_states);
        w.f64s(&self.rewards);
        w.u64(self.trial_starts.len() as u64);
        for &s in &self.trial_starts {
            w.u64(s as u64);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader::new(bytes);
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let states = r.f64s()?;
        let actions = r.f64s()?;
        let next_states = r.f64s()?;
        let rewards = r.f64s()?;
        let n_starts = r.u64()? as usize;
        let trial_starts = (0..n_starts)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        let n = rewards.len();
        if states.len() != n * state_dim
            || next_states.len() != n * state_dim
            || actions.len() != n * action_dim
            || trial_starts.iter().any(|&s| s > n)
        {
            return Err(CheckpointError::Corrupt("inconsistent dataset dimensions".into()));
        }
        Ok(TransitionDataset {
            state_dim,
            action_dim,
            states,
            actions,
            next_states,
            rewards,
            trial_starts,
        })
    }
}

/// Where each layer's weights and biases live in a member's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    sizes: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    total: usize,
}

impl Layout {
    fn new(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            let w_off = off;
            off += w[0] * w[1];
            let b_off = off;
            off += w[1];
            offsets.push((w_off, b_off));
        }
        Layout {
            sizes,
            offsets,
            total: off,
        }
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weight<'a>(&self, params: &'a [f64], l: usize) -> ArrayView2<'a, f64> {
        let (w, _) = self.offsets[l];
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        ArrayView2::from_shape((i, o), &params[w..w + i * o]).unwrap()
    }

    fn bias<'a>(&self, params: &'a [f64], l: usize) -> ArrayView1<'a, f64> {
        let (_, b) = self.offsets[l];
        ArrayView1::from(&params[b..b + self.sizes[l + 1]])
    }

    fn weight_mut<'a>(&self, params: &'a mut [f64], l: usize) -> ArrayViewMut2<'a, f64> {
        let (w, _) = self.offsets[l];
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        ArrayViewMut2::from_shape((i, o), &mut params[w..w + i * o]).unwrap()
    }

    fn bias_mut<'a>(&self, params: &'a mut [f64], l: usize) -> ArrayViewMut1<'a, f64> {
        let (_, b) = self.offsets[l];
        ArrayViewMut1::from(&mut params[b..b + self.sizes[l + 1]])
    }

    /// Raw network output (mean and unsquashed log-variance columns).
    fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let mut z = h.dot(&self.weight(params, l));
            z += &self.bias(params, l);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(act);
            }
            h = z;
        }
        h
    }

    /// Mean batch NLL in normalized space; writes its gradient into `grad`.
    fn loss_and_grad(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> f64 {
        let n = x.nrows() as f64;
        let dim = target.ncols();
        let layers = self.n_layers();
        // Pre-activations per layer; the input to layer l is act(pre[l-1]) or x.
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut h = x.to_owned();
        for l in 0..layers {
            let mut z = h.dot(&self.weight(params, l));
            z += &self.bias(params, l);
            inputs.push(h);
            h = if l + 1 < layers { z.mapv(act) } else { z.clone() };
            pre.push(z);
        }
        let out = &pre[layers - 1];
        let mut d_out = Array2::<f64>::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..out.nrows() {
            for d in 0..dim {
                let mu = out[[i, d]];
                let raw = out[[i, dim + d]];
                let s = sigmoid(raw);
                let lv = LOG_VAR_MIN + (LOG_VAR_MAX - LOG_VAR_MIN) * s;
                let inv_var = (-lv).exp();
                let r = target[[i, d]] - mu;
                loss += HALF_LN_2PI + 0.5 * lv + 0.5 * r * r * inv_var;
                d_out[[i, d]] = -r * inv_var / n;
                let d_lv = 0.5 * (1.0 - r * r * inv_var) / n;
                d_out[[i, dim + d]] = d_lv * (LOG_VAR_MAX - LOG_VAR_MIN) * s * (1.0 - s);
            }
        }
        let mut delta = d_out;
        for l in (0..layers).rev() {
            general_mat_mul(1.0, &inputs[l].t(), &delta, 0.0, &mut self.weight_mut(grad, l));
            self.bias_mut(grad, l).assign(&delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weight(params, l).t());
                back.zip_mut_with(&pre[l - 1], |g, &z| *g *= act_grad(z));
                delta = back;
            }
        }
        loss / n
    }

    fn loss(&self, params: &[f64], x: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        let out = self.forward(params, x);
        let dim = target.ncols();
        let mut loss = 0.0;
        for i in 0..out.nrows() {
            for d in 0..dim {
                let lv = squash_log_var(out[[i, dim + d]]);
                let r = target[[i, d]] - out[[i, d]];
                loss += HALF_LN_2PI + 0.5 * lv + 0.5 * r * r * (-lv).exp();
            }
        }
        loss / x.nrows() as f64
    }
}

/// One network's parameters plus its AdamW moments.
#[derive(Debug, Clone, PartialEq)]
struct Member {
    params: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Member {
    fn init(layout: &Layout, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; layout.total];
        for l in 0..layout.n_layers() {
            let (fan_in, fan_out) = (layout.sizes[l], layout.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layout.weight_mut(&mut params, l).iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Member {
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            params,
            t: 0,
        }
    }

    fn adamw_step(&mut self, grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, m), v), &g) in self
            .params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grad)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *p -= lr * (step + weight_decay * *p);
        }
    }
}

/// Per-dimension normalization of network inputs and delta targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl NormStats {
    fn identity(input_dim: usize, output_dim: usize) -> Self {
        NormStats {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            target_mean: vec![0.0; output_dim],
            target_std: vec![1.0; output_dim],
        }
    }

    fn fit(data: &TransitionDataset) -> Self {
        let (sd, ad) = (data.state_dim(), data.action_dim());
        let n = data.len() as f64;
        let mut im = vec![0.0; sd + ad];
        let mut tm = vec![0.0; sd];
        for i in 0..data.len() {
            for (k, v) in data.state(i).iter().chain(data.action(i)).enumerate() {
                im[k] += v;
            }
            for k in 0..sd {
                tm[k] += data.next_state(i)[k] - data.state(i)[k];
            }
        }
        im.iter_mut().for_each(|v| *v /= n);
        tm.iter_mut().for_each(|v| *v /= n);
        let mut is = vec![0.0; sd + ad];
        let mut ts = vec![0.0; sd];
        for i in 0..data.len() {
            for (k, v) in data.state(i).iter().chain(data.action(i)).enumerate() {
                is[k] += (v - im[k]).powi(2);
            }
            for k in 0..sd {
                ts[k] += (data.next_state(i)[k] - data.state(i)[k] - tm[k]).powi(2);
            }
        }
        let finish = |v: &mut Vec<f64>| {
            v.iter_mut()
                .for_each(|x| *x = (*x / n).sqrt().max(MIN_STD));
        };
        finish(&mut is);
        finish(&mut ts);
        NormStats {
            input_mean: im,
            input_std: is,
            target_mean: tm,
            target_std: ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch NLL per epoch, averaged over ensemble members.
    pub epoch_nll: Vec<f64>,
}

/// Ensemble of probabilistic feedforward dynamics networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnsemble {
    state_dim: usize,
    action_dim: usize,
    layout: Layout,
    members: Vec<Member>,
    norm: NormStats,
}

impl GaussianEnsemble {
    /// `hidden` lists the hidden-layer widths.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        ensemble_size: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Self {
        assert!(ensemble_size > 0 && !hidden.is_empty());
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * state_dim);
        let layout = Layout::new(sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..ensemble_size)
            .map(|_| Member::init(&layout, &mut rng))
            .collect();
        GaussianEnsemble {
            state_dim,
            action_dim,
            norm: NormStats::identity(state_dim + action_dim, state_dim),
            layout,
            members,
        }
    }

    /// Five members with two hidden layers of 64 units.
    pub fn with_defaults(state_dim: usize, action_dim: usize, seed: u64) -> Self {
        Self::new(
            state_dim,
            action_dim,
            DEFAULT_ENSEMBLE_SIZE,
            &[DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            seed,
        )
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    pub fn params(&self, member: usize) -> &[f64] {
        &self.members[member].params
    }

    pub fn params_mut(&mut self, member: usize) -> &mut [f64] {
        &mut self.members[member].params
    }

    pub fn param_l2_norm(&self) -> f64 {
        self.members
            .iter()
            .flat_map(|m| m.params.iter())
            .map(|p| p * p)
            .sum::<f64>()
            .sqrt()
    }

    fn check_dims(&self, state: &[f64], action: &[f64]) -> Result<(), DynamicsError> {
        if state.len() != self.state_dim {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        if action.len() != self.action_dim {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.action_dim,
                got: action.len(),
            });
        }
        Ok(())
    }

    fn normalize_into(&self, state: &[f64], action: &[f64], row: &mut [f64]) {
        for (k, v) in state.iter().chain(action).enumerate() {
            row[k] = (v - self.norm.input_mean[k]) / self.norm.input_std[k];
        }
    }

    fn normalized_inputs(&self, data: &TransitionDataset) -> (Array2<f64>, Array2<f64>) {
        let n = data.len();
        let mut x = Array2::zeros((n, self.state_dim + self.action_dim));
        let mut t = Array2::zeros((n, self.state_dim));
        for i in 0..n {
            self.normalize_into(
                data.state(i),
                data.action(i),
                x.row_mut(i).as_slice_mut().unwrap(),
            );
            for k in 0..self.state_dim {
                let delta = data.next_state(i)[k] - data.state(i)[k];
                t[[i, k]] = (delta - self.norm.target_mean[k]) / self.norm.target_std[k];
            }
        }
        (x, t)
    }

    /// Mean delta and variance for one input, in raw state units.
    pub fn predict(
        &self,
        state: &[f64],
        action: &[f64],
        member: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        self.check_dims(state, action)?;
        if member >= self.members.len() {
            return Err(DynamicsError::MemberOutOfRange(member));
        }
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteInput);
        }
        let mut means = vec![0.0; self.state_dim];
        let mut vars = vec![0.0; self.state_dim];
        self.predict_batch(member, state, action, 1, &mut means, &mut vars);
        Ok((means, vars))
    }

    /// Next-state point estimate `state + mean delta`.
    pub fn predict_next_mean(
        &self,
        state: &[f64],
        action: &[f64],
        member: usize,
    ) -> Result<Vec<f64>, DynamicsError> {
        let (mean, _) = self.predict(state, action, member)?;
        Ok(state.iter().zip(mean).map(|(s, d)| s + d).collect())
    }

    /// Batched raw-space prediction for `n` row-major inputs.
    pub fn predict_batch(
        &self,
        member: usize,
        states: &[f64],
        actions: &[f64],
        n: usize,
        mean_out: &mut [f64],
        var_out: &mut [f64],
    ) {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut x = Array2::zeros((n, sd + ad));
        for i in 0..n {
            self.normalize_into(
                &states[i * sd..(i + 1) * sd],
                &actions[i * ad..(i + 1) * ad],
                x.row_mut(i).as_slice_mut().unwrap(),
            );
        }
        let out = self.layout.forward(&self.members[member].params, x.view());
        for i in 0..n {
            for k in 0..sd {
                let std = self.norm.target_std[k];
                mean_out[i * sd + k] = self.norm.target_mean[k] + std * out[[i, k]];
                var_out[i * sd + k] = std * std * squash_log_var(out[[i, sd + k]]).exp();
            }
        }
    }

    /// Mean raw-space NLL of `data` averaged over records and members.
    pub fn mean_nll(&self, data: &TransitionDataset) -> Result<f64, DynamicsError> {
        if data.is_empty() {
            return Err(DynamicsError::EmptyDataset);
        }
        if data.state_dim() != self.state_dim || data.action_dim() != self.action_dim {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.state_dim + self.action_dim,
                got: data.state_dim() + data.action_dim(),
            });
        }
        let n = data.len();
        let sd = self.state_dim;
        let mut means = vec![0.0; n * sd];
        let mut vars = vec![0.0; n * sd];
        let mut total = 0.0;
        for b in 0..self.members.len() {
            self.predict_batch(b, &data.states, &data.actions, n, &mut means, &mut vars);
            for i in 0..n {
                let target: Vec<f64> = (0..sd)
                    .map(|k| data.next_state(i)[k] - data.state(i)[k])
                    .collect();
                let lv: Vec<f64> = vars[i * sd..(i + 1) * sd].iter().map(|v| v.ln()).collect();
                total += gaussian_nll(&means[i * sd..(i + 1) * sd], &lv, &target)?;
            }
        }
        Ok(total / (n * self.members.len()) as f64)
    }

    /// Trains every member for `hp.training_epochs` passes over its own
    /// bootstrap resample of `data`, continuing from the current parameters.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &TransitionDataset,
        hp: &ModelTrainHp,
        rng: &mut R,
    ) -> Result<TrainReport, DynamicsError> {
        if hp.training_epochs == 0 {
            return Ok(TrainReport::default());
        }
        if data.is_empty() {
            return Err(DynamicsError::EmptyDataset);
        }
        if data.state_dim() != self.state_dim || data.action_dim() != self.action_dim {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.state_dim + self.action_dim,
                got: data.state_dim() + data.action_dim(),
            });
        }
        self.norm = NormStats::fit(data);
        let (x, t) = self.normalized_inputs(data);
        let n = data.len();
        let seeds: Vec<u64> = (0..self.members.len()).map(|_| rng.random()).collect();
        let mut epoch_nll = vec![0.0; hp.training_epochs];
        let layout = self.layout.clone();
        let in_dim = x.ncols();
        let out_dim = t.ncols();
        let mut grad = vec![0.0; layout.total];
        for (b, member) in self.members.iter_mut().enumerate() {
            let mut member_rng = ChaCha8Rng::seed_from_u64(seeds[b]);
            let mut idx = bootstrap_indices(n, member_rng.random());
            let mut xb = Array2::zeros((BATCH_SIZE, in_dim));
            let mut tb = Array2::zeros((BATCH_SIZE, out_dim));
            for (epoch, slot) in epoch_nll.iter_mut().enumerate() {
                idx.shuffle(&mut member_rng);
                let mut sum = 0.0;
                let mut batches = 0usize;
                for chunk in idx.chunks(BATCH_SIZE) {
                    let rows = chunk.len();
                    for (r, &i) in chunk.iter().enumerate() {
                        xb.row_mut(r).assign(&x.row(i));
                        tb.row_mut(r).assign(&t.row(i));
                    }
                    let loss = layout.loss_and_grad(
                        &member.params,
                        xb.slice(s![..rows, ..]),
                        tb.slice(s![..rows, ..]),
                        &mut grad,
                    );
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(DynamicsError::NonFiniteLoss { member: b, epoch });
                    }
                    member.adamw_step(&grad, hp.learning_rate, hp.weight_decay);
                    sum += loss;
                    batches += 1;
                }
                *slot += sum / batches as f64 / seeds.len() as f64;
            }
        }
        Ok(TrainReport { epoch_nll })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u16(MODEL_STATE_VERSION);
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        w.u32(self.layout.sizes.len() as u32);
        for &s in &self.layout.sizes {
            w.u32(s as u32);
        }
        w.u32(self.members.len() as u32);
        for m in &self.members {
            w.f64s(&m.params);
            w.f64s(&m.m);
            w.f64s(&m.v);
            w.u64(m.t);
        }
        w.f64s(&self.norm.input_mean);
        w.f64s(&self.norm.input_std);
        w.f64s(&self.norm.target_mean);
        w.f64s(&self.norm.target_std);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader::new(bytes);
        let version = r.u16()?;
        if version != MODEL_STATE_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: MODEL_STATE_VERSION,
            });
        }
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let n_sizes = r.u32()? as usize;
        if !(3..=16).contains(&n_sizes) {
            return Err(CheckpointError::Corrupt("implausible layer count".into()));
        }
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if sizes[0] != state_dim + action_dim || *sizes.last().unwrap() != 2 * state_dim {
            return Err(CheckpointError::Corrupt("layer sizes do not match dimensions".into()));
        }
        let layout = Layout::new(sizes);
        let n_members = r.u32()? as usize;
        let mut members = Vec::with_capacity(n_members.min(64));
        for _ in 0..n_members {
            let params = r.f64s()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            let t = r.u64()?;
            if params.len() != layout.total || m.len() != layout.total || v.len() != layout.total {
                return Err(CheckpointError::Corrupt("parameter count mismatch".into()));
            }
            members.push(Member { params, m, v, t });
        }
        let norm = NormStats {
            input_mean: r.f64s()?,
            input_std: r.f64s()?,
            target_mean: r.f64s()?,
            target_std: r.f64s()?,
        };
        r.finish()?;
        if members.is_empty()
            || norm.input_mean.len() != state_dim + action_dim
            || norm.input_std.len() != state_dim + action_dim
            || norm.target_mean.len() != state_dim
            || norm.target_std.len() != state_dim
        {
            return Err(CheckpointError::Corrupt("normalization statistics mismatch".into()));
        }
        Ok(GaussianEnsemble {
            state_dim,
            action_dim,
            layout,
            members,
            norm,
        })
    }
}

/// `n` indices drawn uniformly with replacement.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Adds i.i.d. Gaussian observation noise; used to build synthetic datasets.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    Normal::new(0.0, std).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// Test-only access to the loss and its analytic gradient.
#[doc(hidden)]
pub mod gradcheck {
    use super::*;

    pub struct TinyNet {
        layout: Layout,
        pub params: Vec<f64>,
    }

    impl TinyNet {
        pub fn new(sizes: Vec<usize>, seed: u64) -> Self {
            let layout = Layout::new(sizes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut member = Member::init(&layout, &mut rng);
            // Non-zero biases so every parameter's gradient is exercised.
            for l in 0..layout.n_layers() {
                for b in layout.bias_mut(&mut member.params, l).iter_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
            TinyNet {
                layout,
                params: member.params,
            }
        }

        pub fn loss(&self, params: &[f64], x: ArrayView2<f64>, t: ArrayView2<f64>) -> f64 {
            self.layout.loss(params, x, t)
        }

        pub fn loss_and_grad(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Vec<f64>) {
            let mut grad = vec![0.0; self.layout.total];
            let l = self.layout.loss_and_grad(&self.params, x, t, &mut grad);
            (l, grad)
        }
    }
}

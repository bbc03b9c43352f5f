//! The optimizee contract shared by every tuner, its checkpoint format, and a
//! cheap synthetic trainable whose optimum drifts over time.
//!
//! # Checkpoint byte layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `TMCK`                            |
//! | 4      | 2    | format version (`u16`, currently 1)     |
//! | 6      | 1    | flags, bit 0 = history included         |
//! | 7      | 1    | reserved, zero                          |
//!
//! followed by five sections, each a `u64` byte length and the payload:
//!
//! 1. `model_state` (opaque to the orchestrator)
//! 2. `history` (empty when bit 0 is clear)
//! 3. `hyperparameters`: `u32` count, then per entry a `u16` name length,
//!    UTF-8 name and `f64` value, in name order
//! 4. `counters`: `u64` trial index, `u32` score window, `u64` return count,
//!    then the returns as `f64`
//! 5. `rng_state` (opaque)

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::confspace::{Configuration, ParamSpace, ParamSpec, Group};
use crate::error::{CheckpointError, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DEFAULT_SCORE_WINDOW: usize = 3;

/// Per-trial returns and the trailing-mean score used as the tuning objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreWindow {
    window: usize,
    returns: Vec<f64>,
}

impl Default for ScoreWindow {
    fn default() -> Self {
        Self::new(DEFAULT_SCORE_WINDOW)
    }
}

impl ScoreWindow {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "score window must be positive");
        ScoreWindow {
            window,
            returns: Vec::new(),
        }
    }

    pub fn from_returns(window: usize, returns: Vec<f64>) -> Self {
        let mut w = Self::new(window);
        w.returns = returns;
        w
    }

    pub fn push(&mut self, ret: f64) {
        self.returns.push(ret);
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Mean of the last `min(window, n)` returns.
    pub fn score(&self) -> Result<f64, TrainError> {
        if self.returns.is_empty() {
            return Err(TrainError::EmptyHistory);
        }
        let tail = &self.returns[self.returns.len().saturating_sub(self.window)..];
        Ok(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Everything PBT's exploit step copies from one member into another.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableCheckpoint {
    pub model_state: Vec<u8>,
    /// `None` when the checkpoint was taken with `copy_history = false`.
    pub history: Option<Vec<u8>>,
    pub hyperparameters: Configuration,
    pub trial_index: u64,
    pub returns: ScoreWindow,
    pub rng_state: Vec<u8>,
}

impl TrainableCheckpoint {
    pub fn includes_history(&self) -> bool {
        self.history.is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.raw(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u8(u8::from(self.history.is_some()));
        w.u8(0);
        w.section(&self.model_state);
        w.section(self.history.as_deref().unwrap_or(&[]));
        let mut hp = ByteWriter::new();
        hp.config(&self.hyperparameters);
        w.section(&hp.finish());
        let mut counters = ByteWriter::new();
        counters.u64(self.trial_index);
        counters.u32(self.returns.window() as u32);
        counters.f64s(self.returns.returns());
        w.section(&counters.finish());
        w.section(&self.rng_state);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader::new(bytes);
        if r.raw(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let flags = r.u8()?;
        if flags & !1 != 0 || r.u8()? != 0 {
            return Err(CheckpointError::Corrupt("unknown header flags".into()));
        }
        let model_state = r.section()?.to_vec();
        let history_bytes = r.section()?;
        let history = if flags & 1 == 1 {
            Some(history_bytes.to_vec())
        } else if history_bytes.is_empty() {
            None
        } else {
            return Err(CheckpointError::Corrupt(
                "history present although the header excludes it".into(),
            ));
        };
        let mut hp = ByteReader::new(r.section()?);
        let hyperparameters = hp.config()?;
        hp.finish()?;
        let mut counters = ByteReader::new(r.section()?);
        let trial_index = counters.u64()?;
        let window = counters.u32()? as usize;
        let returns = counters.f64s()?;
        counters.finish()?;
        if window == 0 {
            return Err(CheckpointError::Corrupt("zero score window".into()));
        }
        let rng_state = r.section()?.to_vec();
        r.finish()?;
        Ok(TrainableCheckpoint {
            model_state,
            history,
            hyperparameters,
            trial_index,
            returns: ScoreWindow::from_returns(window, returns),
            rng_state,
        })
    }
}

/// An optimizee the tuners can drive one trial at a time.
pub trait Trainable: Send {
    /// The hyperparameters this instance accepts.
    fn space(&self) -> &ParamSpace;

    /// Runs exactly one trial under `config` and returns its return.
    fn step(&mut self, config: &Configuration, seed: u64) -> Result<f64, TrainError>;

    fn trial_index(&self) -> u64;

    fn score_window(&self) -> &ScoreWindow;

    fn score(&self) -> Result<f64, TrainError> {
        self.score_window().score()
    }

    /// Number of stored history records (transitions, for MBRL members).
    fn history_len(&self) -> usize;

    fn checkpoint(&self, copy_history: bool) -> TrainableCheckpoint;

    /// Overwrites model, hyperparameters and counters; the history is replaced
    /// only when the checkpoint carries one.
    fn restore(&mut self, checkpoint: &TrainableCheckpoint) -> Result<(), TrainError>;
}

/// Shape of the drifting response surface `f(h, t) = -(h - m(t))^2`.
///
/// `m(t)` holds at `low` for the first `stationary_trials` trials and then
/// follows a triangle wave between `low` and `high` with period `drift_period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSurface {
    pub drift_period: u64,
    pub stationary_trials: u64,
    pub low: f64,
    pub high: f64,
    /// Standard deviation of Gaussian noise added to each trial's gain.
    pub noise_std: f64,
}

impl Default for DriftSurface {
    fn default() -> Self {
        DriftSurface {
            drift_period: 100,
            stationary_trials: 0,
            low: 0.1,
            high: 0.9,
            noise_std: 0.0,
        }
    }
}

impl DriftSurface {
    pub fn optimum(&self, t: u64) -> f64 {
        if t < self.stationary_trials {
            return self.low;
        }
        let phase = ((t - self.stationary_trials) % self.drift_period) as f64
            / self.drift_period as f64;
        self.low + (self.high - self.low) * (1.0 - (2.0 * phase - 1.0).abs())
    }

    pub fn value(&self, h: f64, t: u64) -> f64 {
        let d = h - self.optimum(t);
        -d * d
    }
}

/// Name of the synthetic trainable's single hyperparameter.
pub const SYNTHETIC_PARAM: &str = "h";

pub fn synthetic_space() -> ParamSpace {
    ParamSpace::new(
        Group::Joint,
        vec![ParamSpec::continuous(SYNTHETIC_PARAM, 0.01, 1.0, false, 0.5).unwrap()],
    )
    .unwrap()
}

/// Accumulates surface values: `theta` is the running sum of per-trial gains
/// and each trial returns the running mean `theta / t`. The state persists
/// across trials, so only a schedule that tracks `m(t)` can keep a high return.
#[derive(Debug, Clone)]
pub struct SyntheticTrainable {
    surface: DriftSurface,
    space: ParamSpace,
    theta: f64,
    t: u64,
    gains: Vec<f64>,
    returns: ScoreWindow,
    active: Configuration,
    last_seed: u64,
}

impl SyntheticTrainable {
    pub fn new(surface: DriftSurface) -> Self {
        let space = synthetic_space();
        let active = space.defaults();
        SyntheticTrainable {
            surface,
            space,
            theta: 0.0,
            t: 0,
            gains: Vec::new(),
            returns: ScoreWindow::default(),
            active,
            last_seed: 0,
        }
    }

    pub fn surface(&self) -> &DriftSurface {
        &self.surface
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn config(h: f64) -> Configuration {
        let mut c = Configuration::new();
        c.set(SYNTHETIC_PARAM, h);
        c
    }
}

impl Trainable for SyntheticTrainable {
    fn space(&self) -> &ParamSpace {
        &self.space
    }

    fn step(&mut self, config: &Configuration, seed: u64) -> Result<f64, TrainError> {
        self.space.validate(config)?;
        let h = config.get(SYNTHETIC_PARAM).expect("validated");
        let mut gain = self.surface.value(h, self.t);
        if self.surface.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, self.surface.noise_std)
                .map_err(|e| TrainError::NumericalOverflow(e.to_string()))?;
            gain += noise.sample(&mut rng);
        }
        let theta = self.theta + gain;
        let ret = theta / (self.t + 1) as f64;
        if !ret.is_finite() {
            return Err(TrainError::NumericalOverflow(format!(
                "synthetic return {ret} at trial {}",
                self.t
            )));
        }
        self.theta = theta;
        self.t += 1;
        self.gains.push(gain);
        self.returns.push(ret);
        self.active = config.clone();
        self.last_seed = seed;
        Ok(ret)
    }

    fn trial_index(&self) -> u64 {
        self.t
    }

    fn score_window(&self) -> &ScoreWindow {
        &self.returns
    }

    fn history_len(&self) -> usize {
        self.gains.len()
    }

    fn checkpoint(&self, copy_history: bool) -> TrainableCheckpoint {
        let mut model = ByteWriter::new();
        model.f64(self.theta);
        let history = copy_history.then(|| {
            let mut w = ByteWriter::new();
            w.f64s(&self.gains);
            w.finish()
        });
        TrainableCheckpoint {
            model_state: model.finish(),
            history,
            hyperparameters: self.active.clone(),
            trial_index: self.t,
            returns: self.returns.clone(),
            rng_state: self.last_seed.to_le_bytes().to_vec(),
        }
    }

    fn restore(&mut self, ckpt: &TrainableCheckpoint) -> Result<(), TrainError> {
        let mut model = ByteReader::new(&ckpt.model_state);
        let theta = model.f64()?;
        model.finish()?;
        let gains = match &ckpt.history {
            Some(bytes) => {
                let mut r = ByteReader::new(bytes);
                let g = r.f64s()?;
                r.finish()?;
                Some(g)
            }
            None => None,
        };
        let seed: [u8; 8] = ckpt
            .rng_state
            .as_slice()
            .try_into()
            .map_err(|_| CheckpointError::Corrupt("rng state must be 8 bytes".into()))?;
        self.theta = theta;
        if let Some(g) = gains {
            self.gains = g;
        }
        self.t = ckpt.trial_index;
        self.returns = ckpt.returns.clone();
        self.active = ckpt.hyperparameters.clone();
        self.last_seed = u64::from_le_bytes(seed);
        Ok(())
    }
}

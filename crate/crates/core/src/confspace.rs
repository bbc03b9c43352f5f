//! Hyperparameter spaces: typed domains, sampling, PBT perturbation and the
//! `.space` file format.
//!
//! A `.space` file is TOML with one table per parameter, nested under its
//! group (`model_train` or `cem_optimizer`). Table order is preserved and
//! defines the parameter order of the resulting [`ParamSpace`]:
//!
//! ```toml
//! [model_train.learning_rate]
//! kind = "continuous"
//! range = [3e-5, 3e-3]
//! default = 1e-3
//! log = true
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SpaceError;

/// Multiplicative factors applied by [`perturb`].
pub const PERTURB_FACTORS: [f64; 2] = [0.8, 1.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Continuous,
    Integer,
}

/// The two hyperparameter groups that are tuned separately, and their union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ModelTrain,
    CemOptimizer,
    Joint,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::ModelTrain => "model_train",
            Group::CemOptimizer => "cem_optimizer",
            Group::Joint => "joint",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Group {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model_train" => Ok(Group::ModelTrain),
            "cem_optimizer" => Ok(Group::CemOptimizer),
            "joint" => Ok(Group::Joint),
            other => Err(SpaceError::UnknownGroup(other.to_string())),
        }
    }
}

/// One hyperparameter domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub lower: f64,
    pub upper: f64,
    pub log_scale: bool,
    pub default: f64,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        kind: ParamKind,
        lower: f64,
        upper: f64,
        log_scale: bool,
        default: f64,
    ) -> Result<Self, SpaceError> {
        let spec = ParamSpec {
            name: name.into(),
            kind,
            lower,
            upper,
            log_scale,
            default,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn continuous(
        name: impl Into<String>,
        lower: f64,
        upper: f64,
        log_scale: bool,
        default: f64,
    ) -> Result<Self, SpaceError> {
        Self::new(name, ParamKind::Continuous, lower, upper, log_scale, default)
    }

    pub fn integer(
        name: impl Into<String>,
        lower: i64,
        upper: i64,
        log_scale: bool,
        default: i64,
    ) -> Result<Self, SpaceError> {
        Self::new(
            name,
            ParamKind::Integer,
            lower as f64,
            upper as f64,
            log_scale,
            default as f64,
        )
    }

    fn validate(&self) -> Result<(), SpaceError> {
        let bad = |reason: &str| SpaceError::InvalidSpec {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.is_empty() {
            return Err(bad("empty name"));
        }
        if !self.lower.is_finite() || !self.upper.is_finite() || !self.default.is_finite() {
            return Err(bad("bounds and default must be finite"));
        }
        if self.lower > self.upper {
            return Err(bad("lower bound exceeds upper bound"));
        }
        if self.log_scale && self.lower <= 0.0 {
            return Err(bad("log-scaled parameters need a positive lower bound"));
        }
        if self.kind == ParamKind::Integer
            && (self.lower.fract() != 0.0 || self.upper.fract() != 0.0 || self.default.fract() != 0.0)
        {
            return Err(bad("integer parameters need integer bounds and default"));
        }
        if self.default < self.lower || self.default > self.upper {
            return Err(SpaceError::DefaultOutOfBounds {
                name: self.name.clone(),
                default: self.default,
                lower: self.lower,
                upper: self.upper,
            });
        }
        Ok(())
    }

    /// Rounds integer values half away from zero and clamps to the bounds.
    pub fn legalize(&self, value: f64) -> f64 {
        let v = match self.kind {
            ParamKind::Integer => value.round(),
            ParamKind::Continuous => value,
        };
        v.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, value: f64) -> bool {
        value.is_finite()
            && value >= self.lower
            && value <= self.upper
            && (self.kind == ParamKind::Continuous || value.fract() == 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lower == self.upper {
            return self.lower;
        }
        let u: f64 = rng.random();
        let raw = if self.log_scale {
            let (lo, hi) = (self.lower.log10(), self.upper.log10());
            10f64.powf(lo + u * (hi - lo))
        } else {
            self.lower + u * (self.upper - self.lower)
        };
        self.legalize(raw)
    }
}

/// An ordered list of parameter domains belonging to one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub group: Group,
    specs: Vec<ParamSpec>,
}

impl ParamSpace {
    pub fn new(group: Group, specs: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            if specs[..i].iter().any(|s| s.name == spec.name) {
                return Err(SpaceError::DuplicateName(spec.name.clone()));
            }
        }
        Ok(ParamSpace { group, specs })
    }

    /// Disjoint union of a model-training and a CEM space.
    pub fn joint(model_train: &ParamSpace, cem: &ParamSpace) -> Result<Self, SpaceError> {
        let specs = model_train
            .specs
            .iter()
            .chain(cem.specs.iter())
            .cloned()
            .collect();
        ParamSpace::new(Group::Joint, specs)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn defaults(&self) -> Configuration {
        Configuration(
            self.specs
                .iter()
                .map(|s| (s.name.clone(), s.default))
                .collect(),
        )
    }

    /// Checks that `config` has exactly this space's keys, all finite and in bounds.
    pub fn validate(&self, config: &Configuration) -> Result<(), SpaceError> {
        for (name, &value) in config.iter() {
            let spec = self
                .spec(name)
                .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))?;
            if !value.is_finite() {
                return Err(SpaceError::NonFinite(name.to_string()));
            }
            if !spec.contains(value) {
                return Err(SpaceError::OutOfBounds {
                    name: name.to_string(),
                    value,
                });
            }
        }
        if let Some(missing) = self.specs.iter().find(|s| config.get(&s.name).is_none()) {
            return Err(SpaceError::MissingParameter(missing.name.clone()));
        }
        Ok(())
    }
}

/// A concrete hyperparameter assignment. Integer values are stored as exact
/// whole `f64`s.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(BTreeMap<String, f64>);

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Values of `other` override values of `self`.
    pub fn merged_with(&self, other: &Configuration) -> Configuration {
        let mut out = self.clone();
        for (k, v) in &other.0 {
            out.0.insert(k.clone(), *v);
        }
        out
    }

    /// Bitwise equality of every value; used for PBT-BT's uniqueness rule.
    pub fn same_values(&self, other: &Configuration) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }
}

impl FromIterator<(String, f64)> for Configuration {
    fn from_iter<T: IntoIterator<Item = (String, f64)>>(iter: T) -> Self {
        Configuration(iter.into_iter().collect())
    }
}

pub fn sample<R: Rng + ?Sized>(space: &ParamSpace, rng: &mut R) -> Configuration {
    space
        .specs
        .iter()
        .map(|s| (s.name.clone(), s.sample(rng)))
        .collect()
}

/// Multiplies every value by 0.8 or 1.2 (independent fair coin per parameter),
/// then rounds integers and clamps. Log-scaled values are multiplied directly.
pub fn perturb<R: Rng + ?Sized>(
    config: &Configuration,
    space: &ParamSpace,
    rng: &mut R,
) -> Configuration {
    space
        .specs
        .iter()
        .map(|s| {
            let value = config.get(&s.name).unwrap_or(s.default);
            let factor = PERTURB_FACTORS[usize::from(rng.random::<bool>())];
            (s.name.clone(), s.legalize(value * factor))
        })
        .collect()
}

/// Explore step of PBT: one draw decides for the whole configuration.
pub fn resample_or_perturb<R: Rng + ?Sized>(
    config: &Configuration,
    space: &ParamSpace,
    p_perturb: f64,
    rng: &mut R,
) -> Configuration {
    explore(config, space, p_perturb, rng).0
}

/// Like [`resample_or_perturb`] but also reports whether a perturbation happened.
pub fn explore<R: Rng + ?Sized>(
    config: &Configuration,
    space: &ParamSpace,
    p_perturb: f64,
    rng: &mut R,
) -> (Configuration, bool) {
    let perturbed = rng.random::<f64>() < p_perturb;
    if perturbed {
        (perturb(config, space, rng), true)
    } else {
        (sample(space, rng), false)
    }
}

/// Contents of a `.space` file: a model-training and a CEM group.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceFile {
    pub model_train: ParamSpace,
    pub cem_optimizer: ParamSpace,
}

impl SpaceFile {
    pub fn parse(text: &str) -> Result<Self, SpaceError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SpaceError::Parse(e.to_string()))?;
        let mut model_train = Vec::new();
        let mut cem = Vec::new();
        for (group_name, params) in &table {
            let group: Group = group_name.parse()?;
            let target = match group {
                Group::ModelTrain => &mut model_train,
                Group::CemOptimizer => &mut cem,
                Group::Joint => return Err(SpaceError::UnknownGroup(group_name.clone())),
            };
            let params = params
                .as_table()
                .ok_or_else(|| SpaceError::Parse(format!("[{group_name}] must be a table")))?;
            for (name, body) in params {
                target.push(parse_spec(name, body)?);
            }
        }
        Ok(SpaceFile {
            model_train: ParamSpace::new(Group::ModelTrain, model_train)?,
            cem_optimizer: ParamSpace::new(Group::CemOptimizer, cem)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpaceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpaceError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads a shipped space by name (`pusher`, `reacher`, `hopper_cheetah_daisy`,
    /// `desk`, with or without the `.space` suffix) or falls back to a file path.
    pub fn load_named_or_path(name: &str) -> Result<Self, SpaceError> {
        match builtin_space(name.trim_end_matches(".space")) {
            Some(text) if !Path::new(name).exists() => Self::parse(text),
            _ => Self::load(name),
        }
    }

    pub fn space(&self, group: Group) -> ParamSpace {
        match group {
            Group::ModelTrain => self.model_train.clone(),
            Group::CemOptimizer => self.cem_optimizer.clone(),
            Group::Joint => ParamSpace::joint(&self.model_train, &self.cem_optimizer)
                .expect("groups of one file are disjoint"),
        }
    }

    /// Defaults of every parameter in both groups.
    pub fn defaults(&self) -> Configuration {
        self.space(Group::Joint).defaults()
    }
}

pub const PUSHER_SPACE: &str = include_str!("../spaces/pusher.space");
pub const REACHER_SPACE: &str = include_str!("../spaces/reacher.space");
pub const HOPPER_CHEETAH_DAISY_SPACE: &str = include_str!("../spaces/hopper_cheetah_daisy.space");
pub const DESK_SPACE: &str = include_str!("../spaces/desk.space");

pub fn builtin_space(name: &str) -> Option<&'static str> {
    match name {
        "pusher" => Some(PUSHER_SPACE),
        "reacher" => Some(REACHER_SPACE),
        "hopper_cheetah_daisy" => Some(HOPPER_CHEETAH_DAISY_SPACE),
        "desk" => Some(DESK_SPACE),
        _ => None,
    }
}

fn parse_spec(name: &str, body: &toml::Value) -> Result<ParamSpec, SpaceError> {
    let err = |reason: &str| SpaceError::Parse(format!("{name}: {reason}"));
    let t = body.as_table().ok_or_else(|| err("expected a table"))?;
    let kind = match t.get("kind").and_then(|v| v.as_str()) {
        Some("continuous") => ParamKind::Continuous,
        Some("integer") => ParamKind::Integer,
        Some(other) => return Err(err(&format!("unknown kind `{other}`"))),
        None => return Err(err("missing `kind`")),
    };
    let range = t
        .get("range")
        .and_then(|v| v.as_array())
        .ok_or_else(|| err("missing `range`"))?;
    if range.len() != 2 {
        return Err(err("`range` needs exactly two numbers"));
    }
    let lower = number(&range[0]).ok_or_else(|| err("non-numeric lower bound"))?;
    let upper = number(&range[1]).ok_or_else(|| err("non-numeric upper bound"))?;
    let default = t
        .get("default")
        .and_then(number)
        .ok_or_else(|| err("missing `default`"))?;
    let log_scale = match t.get("log") {
        None => false,
        Some(v) => v.as_bool().ok_or_else(|| err("`log` must be a boolean"))?,
    };
    ParamSpec::new(name, kind, lower, upper, log_scale, default)
}

fn number(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lr_spec() -> ParamSpec {
        ParamSpec::continuous("learning_rate", 3e-5, 3e-3, true, 1e-3).unwrap()
    }

    fn one(spec: ParamSpec) -> ParamSpace {
        ParamSpace::new(Group::ModelTrain, vec![spec]).unwrap()
    }

    #[test]
    fn degenerate_range_samples_its_only_value() {
        let space = one(ParamSpec::integer("k", 5, 5, false, 5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample(&space, &mut rng).get("k"), Some(5.0));
        }
    }

    #[test]
    fn log_sampling_is_log_uniform() {
        let space = one(lr_spec());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| sample(&space, &mut rng).get("learning_rate").unwrap())
            .collect();
        assert!(draws.iter().all(|&v| (3e-5..=3e-3).contains(&v)));
        let geo = (3e-5f64 * 3e-3).sqrt();
        let below = draws.iter().filter(|&&v| v < geo).count() as f64 / 1e4;
        assert!((below - 0.5).abs() <= 0.02, "fraction below geometric mean {below}");
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[5_000];
        assert!((median / 3e-4 - 1.0).abs() < 0.25, "median {median}");
    }

    #[test]
    fn perturb_examples() {
        let spec = ParamSpec::continuous("a", 0.0, 0.5, false, 0.1).unwrap();
        assert!((spec.legalize(0.1 * 1.2) - 0.12).abs() < 1e-15);
        assert_eq!(spec.legalize(0.5 * 1.2), 0.5);
        let h = ParamSpec::integer("plan_horizon", 5, 40, false, 30).unwrap();
        assert_eq!(h.legalize(30.0 * 0.8), 24.0);
    }

    #[test]
    fn perturb_uses_only_the_two_factors_and_keeps_input() {
        let space = one(ParamSpec::continuous("a", 1e-9, 1e9, true, 1.0).unwrap());
        let cfg = space.defaults();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let out = perturb(&cfg, &space, &mut rng).get("a").unwrap();
            assert!(out == 0.8 || out == 1.2, "{out}");
        }
        assert_eq!(cfg.get("a"), Some(1.0));
    }

    #[test]
    fn perturbation_is_multiplicative() {
        let spec = ParamSpec::continuous("a", -1e12, 1e12, false, 5.0).unwrap();
        let once = spec.legalize(5.0 * 0.8);
        let twice = spec.legalize(once * 1.2);
        assert!((twice - 0.96 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn explore_degenerate_probabilities() {
        let space = one(lr_spec());
        let cfg = space.defaults();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let v = resample_or_perturb(&cfg, &space, 1.0, &mut rng)
                .get("learning_rate")
                .unwrap();
            assert!(
                (v - 0.8e-3).abs() < 1e-15 || (v - 1.2e-3).abs() < 1e-15,
                "{v}"
            );
            assert!(!explore(&cfg, &space, 0.0, &mut rng).1);
        }
    }

    #[test]
    fn explore_perturb_fraction() {
        let space = one(lr_spec());
        let cfg = space.defaults();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = (0..10_000)
            .filter(|_| explore(&cfg, &space, 0.75, &mut rng).1)
            .count();
        let frac = n as f64 / 10_000.0;
        assert!((0.73..=0.77).contains(&frac), "{frac}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ParamSpec::continuous("a", 2.0, 1.0, false, 1.5).is_err());
        assert!(ParamSpec::continuous("a", 0.0, 1.0, true, 0.5).is_err());
        assert!(matches!(
            ParamSpec::continuous("a", 0.0, 1.0, false, 2.0),
            Err(SpaceError::DefaultOutOfBounds { .. })
        ));
        assert!(ParamSpec::new("a", ParamKind::Integer, 0.5, 3.0, false, 1.0).is_err());
        let a = ParamSpec::continuous("a", 0.0, 1.0, false, 0.5).unwrap();
        assert!(matches!(
            ParamSpace::new(Group::ModelTrain, vec![a.clone(), a]),
            Err(SpaceError::DuplicateName(_))
        ));
    }

    #[test]
    fn validate_rejects_non_finite_and_missing() {
        let space = one(lr_spec());
        let mut cfg = space.defaults();
        cfg.set("learning_rate", f64::NAN);
        assert!(matches!(space.validate(&cfg), Err(SpaceError::NonFinite(_))));
        assert!(matches!(
            space.validate(&Configuration::new()),
            Err(SpaceError::MissingParameter(_))
        ));
        let mut extra = space.defaults();
        extra.set("other", 1.0);
        assert!(matches!(
            space.validate(&extra),
            Err(SpaceError::UnknownParameter(_))
        ));
    }

    #[test]
    fn shipped_space_files_parse() {
        let pusher = SpaceFile::parse(PUSHER_SPACE).unwrap();
        assert_eq!(pusher.model_train.len(), 3);
        assert_eq!(pusher.cem_optimizer.len(), 5);
        let lr = pusher.model_train.spec("learning_rate").unwrap();
        assert_eq!((lr.lower, lr.upper, lr.default, lr.log_scale), (3e-5, 3e-3, 1e-3, true));
        let pop = pusher.cem_optimizer.spec("cem_population_size").unwrap();
        assert_eq!(pop.kind, ParamKind::Integer);
        assert_eq!((pop.lower, pop.upper, pop.default), (100.0, 700.0, 500.0));

        let reacher = SpaceFile::parse(REACHER_SPACE).unwrap();
        assert_eq!(reacher.model_train.spec("learning_rate").unwrap().default, 7.5e-4);
        assert_eq!(reacher.cem_optimizer.spec("plan_horizon").unwrap().default, 25.0);

        let hcd = SpaceFile::parse(HOPPER_CHEETAH_DAISY_SPACE).unwrap();
        assert_eq!(hcd.model_train.spec("weight_decay").unwrap().default, 7.5e-5);
        assert_eq!(hcd.cem_optimizer.spec("plan_horizon").unwrap().upper, 60.0);

        let joint = hcd.space(Group::Joint);
        assert_eq!(joint.len(), hcd.model_train.len() + hcd.cem_optimizer.len());
        SpaceFile::parse(DESK_SPACE).unwrap();
    }

    #[test]
    fn parser_rejects_out_of_bound_default() {
        let text = r#"
[model_train.learning_rate]
kind = "continuous"
range = [3e-5, 3e-3]
default = 1.0
log = true
"#;
        assert!(matches!(
            SpaceFile::parse(text),
            Err(SpaceError::DefaultOutOfBounds { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spec_strategy() -> impl Strategy<Value = ParamSpec> {
            (any::<bool>(), any::<bool>(), 1e-4f64..1e3, 1.0f64..1e3).prop_map(
                |(int, log, lo, width)| {
                    let (lo, hi) = if int {
                        (lo.ceil(), (lo + width).ceil())
                    } else {
                        (lo, lo + width)
                    };
                    let kind = if int { ParamKind::Integer } else { ParamKind::Continuous };
                    ParamSpec::new("p", kind, lo, hi, log, lo).unwrap()
                },
            )
        }

        proptest! {
            #[test]
            fn sampled_and_perturbed_values_stay_in_bounds(spec in spec_strategy(), seed in any::<u64>()) {
                let space = ParamSpace::new(Group::ModelTrain, vec![spec]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cfg = sample(&space, &mut rng);
                prop_assert!(space.validate(&cfg).is_ok());
                for _ in 0..20 {
                    cfg = resample_or_perturb(&cfg, &space, 0.75, &mut rng);
                    prop_assert!(space.validate(&cfg).is_ok(), "{:?}", cfg);
                }
            }
        }
    }
}

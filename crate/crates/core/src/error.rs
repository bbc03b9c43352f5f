use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("default {default} of `{name}` lies outside [{lower}, {upper}]")]
    DefaultOutOfBounds {
        name: String,
        default: f64,
        lower: f64,
        upper: f64,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{0}` is not finite")]
    NonFinite(String),
    #[error("parameter `{name}` = {value} is out of bounds")]
    OutOfBounds { name: String, value: f64 },
    #[error("space file: {0}")]
    Parse(String),
    #[error("space file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite training loss in ensemble member {member} at epoch {epoch}")]
    NonFiniteLoss { member: usize, epoch: usize },
    #[error("non-finite model input")]
    NonFiniteInput,
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("ensemble member {0} out of range")]
    MemberOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("initial variance is zero and alpha = 1: the distribution can never move")]
    DegenerateVariance,
    #[error("invalid CEM configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Validation(#[from] SpaceError),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("no returns recorded yet")]
    EmptyHistory,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("population of {population} is too small for truncation quantile {quantile}")]
    PopulationTooSmall { population: usize, quantile: f64 },
    #[error("invalid budget: b_min = {b_min}, b_max = {b_max}")]
    InvalidBudget { b_min: u64, b_max: u64 },
    #[error("invalid scheduler options: {0}")]
    InvalidOptions(String),
    #[error("elite archive is empty")]
    EmptyArchive,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("zero rank variance: correlation undefined")]
    ConstantInput,
    #[error("only {0} configurations were evaluated at both budgets")]
    InsufficientOverlap(usize),
    #[error("run log contains no usable records")]
    EmptyLog,
    #[error("evaluation window contains no transitions")]
    EmptyWindow,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("persisted run was launched with a different configuration (hash {persisted}, now {current})")]
    ResumeMismatch { persisted: String, current: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run log: {0}")]
    Log(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl RunError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// CLI exit status: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Space(_)
            | RunError::Scheduler(_)
            | RunError::ResumeMismatch { .. } => 2,
            _ => 3,
        }
    }
}

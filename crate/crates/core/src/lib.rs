//! Hyperparameter schedule search for model-based reinforcement learning.

pub mod analysis;
pub mod codec;
pub mod confspace;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod mbrl;
pub mod orchestrator;
pub mod planner;
pub mod runlog;
pub mod schedulers;
pub mod trainable;

pub use confspace::{Configuration, Group, ParamSpace, ParamSpec};
pub use error::{
    AnalysisError, CheckpointError, DynamicsError, PlannerError, RunError, SchedulerError,
    SpaceError, TrainError,
};
pub use trainable::{Trainable, TrainableCheckpoint};

//! Planar contact-rich flip task: a two-pad fingertip assembly presses a
//! sponge-like block and rolls it over its far bottom edge. Quasi-static
//! penalty-spring physics, a privileged scripted expert, a binary demo
//! dataset, and the rollout evaluator live here.

pub mod dataset;
pub mod eval;
pub mod expert;
pub mod world;

use thiserror::Error;

pub use dataset::{read_dataset, windows, write_dataset, DemoDataset, DemoEpisode, DemoStep};
pub use eval::{evaluate, EpisodeOutcome, EvalOptions, EvalReport, RolloutActor};
pub use expert::{generate_demos, DemoBatch, Expert};
pub use world::{EnvConfig, FlipEnv, Phase, StepInfo, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action rejected: {0}")]
    BadAction(String),
    #[error("expert failed to produce {want} successful demos after {attempts} attempts")]
    ExpertExhausted { want: usize, attempts: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Sensing(#[from] crate::sensing::SensingError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Trace(#[from] crate::fusion::TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Training, inference, evaluation and the exhaustive oracle.

pub mod checkpoint;
pub mod eval;
pub mod oracle;
pub mod rollout;
pub mod train;
pub mod validate;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{contingency_suite, evaluate, EvalConfig, EvalReport, Scenario, ScenarioReport};
pub use oracle::{oracle_search, OracleError, OracleResult};
pub use rollout::{rollout, InferenceMode, RolloutOptions, TrialResult};
pub use train::{train, LossRecord, TrainConfig, TrainOutcome};
pub use validate::{replay_validate, ReplayReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint was trained on feeder {found}, this feeder hashes to {expected}")]
    FeederMismatch { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Nn(#[from] gridseq_nn::NnError),
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: gridseq_nn::NnError,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

//! Optimization loops and experiment harnesses: autoregressive pretraining,
//! multi-task fine-tuning (joint and separate), evaluation with
//! subject-disjoint splits, and the protocol harnesses behind the CLI.

mod evaluate;
mod finetune;
mod harness;
mod metrics;
mod optim;
mod pretrain;

pub use evaluate::{evaluate, mean_std, split_dataset, EvalReport, SplitRatios};
pub use finetune::{finetune, joint_schedule, FinetuneConfig, FinetuneMode, FinetuneOutcome, TaskDataset};
pub use harness::{
    ar_vs_mae_harness, derive_vocab_seed, joint_vs_separate_harness, objective_table, scaling_csv,
    scaling_gnuplot, scaling_harness, HarnessConfig, JointSeparateReport, ObjectiveCell,
    ScalingCell, ScalingLadder,
};
pub use metrics::{MetricRow, MetricsLog};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use pretrain::{pretrain, resume_pretrain, Objective, PretrainConfig, PretrainModel, PretrainOutcome};

use thiserror::Error;

use crate::checkpoint::CkptError;
use crate::dataio::DataError;
use crate::ete::ModelError;
use crate::numkit::NumError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {0:?}")]
    NaNGradient(String),
    #[error("loss diverged at step {step}; last checkpoint retained")]
    Diverged { step: u64 },
    #[error("no gradient recorded for parameter {0:?}")]
    MissingGradient(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

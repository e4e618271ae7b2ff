//! Two-stage episodic training: base training on abundant base classes,
//! then K-shot adaptation on base and novel classes.

mod ablation;
mod adam;
mod batch;
mod checkpoint;
mod config;
pub mod proposals;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::arrays::ArrayFileError;
use crate::data::DataError;
use crate::tensor::TensorError;

pub use ablation::{
    alpha_grid, component_grid, lambda_grid, run_ablation, AblationCell, AblationRow, AblationSpec, AblationTable,
};
pub use adam::{adam_step, adam_update, AdamConfig, AdamState, Moments};
pub use batch::{episode_batch, RegionCache};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use run::{adapt_few_shot, class_bank, few_shot_subset, loss_csv, train_base, EpochLog, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config key {key:?}: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint split {checkpoint:?} does not match data split {data:?}")]
    SplitMismatch { checkpoint: String, data: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    ArrayFile(#[from] ArrayFileError),
}

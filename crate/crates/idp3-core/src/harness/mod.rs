//! Experiment plumbing: demo collection, dataset files, the imitation
//! training loop, closed-loop evaluation, and the ablation grid runner.
//!
//! One rule holds everything together: a [`RunManifest`] fully determines a
//! run. Every seed, width, horizon, and hyperparameter lives there, its
//! content hash names the artifacts, and rerunning the same manifest must
//! reproduce them byte for byte.

mod ablate;
mod dataset;
mod eval;
mod manifest;
mod policy;
mod train;

pub use ablate::{rows_to_csv, run_ablation, AblationGrid, AblationRow};
pub use dataset::{
    collect_demos, compute_stats, load_dataset, sample_window, save_dataset, CollectConfig,
    Dataset, DatasetStats, Trajectory, Window,
};
pub use eval::{evaluate, run_episode, Controller, EpisodeLog, EvalConfig, EvalReport};
pub use manifest::RunManifest;
pub use policy::Policy;
pub use train::{train, TrainOutcome};

use crate::diffusion::DiffusionError;
use crate::encoders::EncoderError;
use crate::sim::SimError;
use crate::tensornet::TensornetError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("scripted expert failed {failed} of {total} rounds; demos are not collectable at this noise level")]
    ExpertFailure { failed: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, last_good: Option<PathBuf> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] TensornetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

//! Minimal dense-tensor autodiff: enough ops for point-cloud encoders,
//! small image stacks, and MLP denoisers, with AdamW and flat binary
//! checkpoints. Values are f64 throughout; determinism is part of the
//! contract, so there is no non-seeded randomness anywhere in this module.

mod checkpoint;
mod fdcheck;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint};
pub use fdcheck::{finite_diff_check, FiniteDiffReport, FD_STEP, FD_TOLERANCE};
pub use graph::{Graph, NodeId};
pub use optim::{AdamWConfig, Param, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensornetError {
    /// An op or gradient produced NaN or infinity. Training loops catch
    /// this, abort the run, and keep the last good checkpoint.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward was already run on this graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

//! Desk-scale implementation of an egocentric 3D diffusion policy.
//!
//! The crate is organized bottom-up: [`geom`] and [`sampling`] provide the
//! point-cloud observation pipeline, [`tensornet`] is a small reverse-mode
//! autodiff engine over f64 tensors, [`encoders`] and [`diffusion`] build the
//! policy networks on top of it, [`sim`] is a kinematic pick-and-place world
//! with an analytic depth camera, and [`harness`] ties everything into
//! datasets, training runs, evaluations, and ablation grids.

// Numerical kernels index several buffers in lockstep; iterator chains would
// obscure that. Negated float comparisons reject NaN along with the
// out-of-range values, on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod encoders;
pub mod geom;
pub mod harness;
pub mod sampling;
pub mod sim;
pub mod tensornet;

pub use diffusion::{ActionChunk, NoiseSchedule, ScheduleKind};
pub use geom::{CropBox, DepthImage, Intrinsics, PointCloud, RigidTransform};
pub use harness::{Dataset, EvalReport, RunManifest, Trajectory};
pub use sampling::SamplingConfig;
pub use sim::{Action, EnvState, Observation, SceneConfig};
pub use tensornet::{Graph, NodeId, Param, ParamSet, Tensor};

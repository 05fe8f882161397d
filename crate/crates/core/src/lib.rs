//! Rectified-flow priors at desk scale.
//!
//! Interpolant schedules, exact Gaussian-mixture oracles, a small conditional
//! velocity MLP with hand-written gradients, Euler sampling and inversion,
//! and the RFDS / iRFDS / RFDS-Rev distillation gradients and loops.

#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod error;
pub mod field;
pub mod interpolant;
pub mod net;
pub mod oracle;
pub mod record;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
pub use field::{guided_velocity, guided_velocity_batch, PassCount, PassCounters, ScoreField, VelocityField};
pub use interpolant::{Schedule, ScheduleKind};
pub use net::{Activation, NetArch, VelocityNet};
pub use oracle::{GaussianMixture, MixtureOracle, StraightFlow};
pub use record::{RunRecord, RunRow};
pub use sampler::{euler_invert, euler_sample, SamplerConfig};
pub use train::{reflow_finetune, train_flow_matching, DataSampler, TrainConfig};

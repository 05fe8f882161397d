//! Distillation through a velocity prior: RFDS, iRFDS, RFDS-Rev and their
//! score-form counterparts.

mod config;
pub mod generator;
mod grad;
mod loops;

pub use config::{DistillConfig, StepRule};
pub use generator::{Generator, Identity, Linear, RotationView, View};
pub use grad::{
    flow_residual, gaussian_moment_penalty, irfds_grad, isds_grad, rfds_grad, rfds_grad_full, sds_grad, sds_weight,
    JacobianTerm,
};
pub use loops::{irfds_invert, rfds_optimize, rfds_optimize_with, rfds_rev_optimize, GradientMode};

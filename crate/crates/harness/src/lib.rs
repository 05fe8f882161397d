pub mod config;
pub mod dataset;
pub mod experiments;
pub mod metrics;
pub mod output;
pub mod plot;

pub use config::{ConfigError, Experiment, RunConfig};
pub use dataset::{Dataset, DatasetKind};

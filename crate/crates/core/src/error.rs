use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} lies outside [0, 1]")]
    Domain(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("schedule endpoint at t = {t}: {what} vanishes")]
    Endpoint { t: f64, what: &'static str },

    #[error("score/velocity conversion is singular at t = {t}")]
    SingularConversion { t: f64 },

    #[error("unknown condition label {label} (field knows {n_labels} labels)")]
    UnknownLabel { label: usize, n_labels: usize },

    #[error("diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("non-finite state at sampler step {step}")]
    BlowUp { step: usize },

    #[error("{0} does not provide input gradients")]
    Capability(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}

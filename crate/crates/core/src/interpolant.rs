//! Linear interpolation schedules between data and Gaussian noise.
//!
//! A schedule fixes the path `x_t = α(t)·x_* + σ(t)·ε`. Two linear families
//! are supported:
//!
//! * [`ScheduleKind::RectifiedFlow`]: `α = t`, `σ = 1 − t` (noise at `t = 0`, data at `t = 1`).
//! * [`ScheduleKind::ConditionalFlowMatching`]: `α = 1 − t`, `σ = t` (data at `t = 0`, noise at `t = 1`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RectifiedFlow,
    ConditionalFlowMatching,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::RectifiedFlow => "rectified_flow",
            ScheduleKind::ConditionalFlowMatching => "conditional_flow_matching",
        }
    }
}

/// Values of the schedule and its time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Lower bound for stochastic timestep draws.
    pub t_min: f64,
    /// Upper bound for stochastic timestep draws.
    pub t_max: f64,
}

pub const DEFAULT_T_MIN: f64 = 0.02;
pub const DEFAULT_T_MAX: f64 = 0.98;

impl Schedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) || !(t_max > t_min && t_max <= 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= t_min < t_max <= 1, got [{t_min}, {t_max}]"
            )));
        }
        Ok(Self { kind, t_min, t_max })
    }

    pub fn rectified_flow() -> Self {
        Self { kind: ScheduleKind::RectifiedFlow, t_min: DEFAULT_T_MIN, t_max: DEFAULT_T_MAX }
    }

    pub fn conditional_flow_matching() -> Self {
        Self {
            kind: ScheduleKind::ConditionalFlowMatching,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn of_kind(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::RectifiedFlow => Self::rectified_flow(),
            ScheduleKind::ConditionalFlowMatching => Self::conditional_flow_matching(),
        }
    }

    pub fn eval(&self, t: f64) -> Result<Coeffs> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(t));
        }
        Ok(match self.kind {
            ScheduleKind::RectifiedFlow => {
                Coeffs { alpha: t, sigma: 1.0 - t, alpha_dot: 1.0, sigma_dot: -1.0 }
            }
            ScheduleKind::ConditionalFlowMatching => {
                Coeffs { alpha: 1.0 - t, sigma: t, alpha_dot: -1.0, sigma_dot: 1.0 }
            }
        })
    }

    /// Time at which `x_t` is pure noise.
    pub fn noise_time(&self) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => 0.0,
            ScheduleKind::ConditionalFlowMatching => 1.0,
        }
    }

    /// Time at which `x_t` is pure data.
    pub fn data_time(&self) -> f64 {
        1.0 - self.noise_time()
    }

    /// Uniform draw on `[t_min, t_max]`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_uniform(rng, self.t_min, self.t_max)
    }

    /// Sign of the distillation weight that makes a step along `−w·residual`
    /// move the input toward the data: `−sign(α̇)`.
    pub fn default_w_sign(&self) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => -1.0,
            ScheduleKind::ConditionalFlowMatching => 1.0,
        }
    }

    pub fn interpolate(&self, x_star: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_star.len(), eps.len())?;
        let c = self.eval(t)?;
        Ok(x_star.iter().zip(eps).map(|(x, e)| c.alpha * x + c.sigma * e).collect())
    }

    /// Flow-matching regression target `α̇·x_* + σ̇·ε`.
    pub fn velocity_target(&self, x_star: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_star.len(), eps.len())?;
        let c = self.eval(t)?;
        Ok(x_star.iter().zip(eps).map(|(x, e)| c.alpha_dot * x + c.sigma_dot * e).collect())
    }
}

pub(crate) fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::Schedule;

/// Step size for the inner noise updates of RFDS-Rev.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Constant(f64),
    /// `1 − σ(t)`.
    OneMinusSigma,
}

impl StepRule {
    pub fn step(&self, sched: &Schedule, t: f64) -> Result<f64> {
        Ok(match self {
            StepRule::Constant(c) => *c,
            StepRule::OneMinusSigma => 1.0 - sched.eval(t)?.sigma,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Sign of `w(t)` for the data-side gradient.
    pub w_sign: f64,
    /// Sign of `w'(t)` for the noise-side gradient; always `−w_sign`.
    pub w_prime_sign: f64,
    pub cfg_scale: f64,
    /// Guidance used by the inner noise phase of RFDS-Rev.
    pub inner_cfg_scale: f64,
    pub lr: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub n_inner: usize,
    pub irfds_step_rule: StepRule,
    pub gauss_reg_weight: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl DistillConfig {
    /// Defaults for optimizing a generator: CFG 50, lr 1e-3, 5000 iterations,
    /// one inner step with step size `1 − σ`, no noise regularizer.
    pub fn generation(sched: &Schedule) -> Self {
        let w = sched.default_w_sign();
        Self {
            w_sign: w,
            w_prime_sign: -w,
            cfg_scale: 50.0,
            inner_cfg_scale: 1.0,
            lr: 1e-3,
            t_min: sched.t_min,
            t_max: sched.t_max,
            n_inner: 1,
            irfds_step_rule: StepRule::OneMinusSigma,
            gauss_reg_weight: 0.0,
            max_iters: 5000,
            seed: 0,
        }
    }

    /// Defaults for noise inversion: CFG 1, lr 3e-3, 1000 iterations, noise
    /// regularizer weight 0.1.
    pub fn inversion(sched: &Schedule) -> Self {
        Self {
            cfg_scale: 1.0,
            lr: 3e-3,
            gauss_reg_weight: 0.1,
            max_iters: 1000,
            ..Self::generation(sched)
        }
    }

    /// Constant unit inner step, the rule for Reflow-straightened fields.
    pub fn for_reflow(mut self) -> Self {
        self.irfds_step_rule = StepRule::Constant(1.0);
        self
    }

    /// Sets `w_sign` and the matching `w_prime_sign`.
    pub fn with_w_sign(mut self, w: f64) -> Self {
        self.w_sign = w;
        self.w_prime_sign = -w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_sign.abs() != 1.0 {
            return Err(Error::Config(format!("w_sign must be +1 or -1, got {}", self.w_sign)));
        }
        if self.w_prime_sign != -self.w_sign {
            return Err(Error::Config("w_prime_sign must equal -w_sign".into()));
        }
        for (name, s) in [("cfg_scale", self.cfg_scale), ("inner_cfg_scale", self.inner_cfg_scale)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {s}")));
            }
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!("t range [{}, {}] invalid", self.t_min, self.t_max)));
        }
        if !(self.gauss_reg_weight >= 0.0) {
            return Err(Error::Config("gauss_reg_weight must be >= 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if let StepRule::Constant(c) = self.irfds_step_rule {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Config(format!("constant inner step must be >= 0, got {c}")));
            }
        }
        Ok(())
    }

    pub(crate) fn validate_rev(&self) -> Result<()> {
        self.validate()?;
        if self.n_inner == 0 {
            return Err(Error::Config("RFDS-Rev needs n_inner >= 1".into()));
        }
        Ok(())
    }
}

//! Distillation gradients built on the flow residual.

use serde::{Deserialize, Serialize};

use super::config::DistillConfig;
use super::generator::{Generator, View};
use crate::error::{check_dim, Result};
use crate::field::{guided_score, guided_velocity, ScoreField, VelocityField};
use crate::interpolant::Schedule;

/// `v̂(x_t, t) − α̇·x − σ̇·ε` with `x_t = α·x + σ·ε` and guided `v̂`.
pub fn flow_residual(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg_scale: f64,
) -> Result<Vec<f64>> {
    let x_t = sched.interpolate(x, eps, t)?;
    let v = guided_velocity(field, &x_t, t, cond, cfg_scale)?;
    let target = sched.velocity_target(x, eps, t)?;
    Ok(v.iter().zip(&target).map(|(a, b)| a - b).collect())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// RFDS gradient over `θ` and the residual it was built from.
pub(crate) fn rfds_parts(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    theta: &[f64],
    view: &View,
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = gen.render(theta, view)?;
    let r = flow_residual(field, sched, &x, eps, t, cond, cfg.cfg_scale)?;
    let up: Vec<f64> = r.iter().map(|ri| cfg.w_sign * ri).collect();
    Ok((gen.vjp(theta, view, &up)?, r))
}

/// `gen.vjp(w·residual)`: the flow-matching gradient with the network
/// Jacobian dropped. Never differentiates through the field.
pub fn rfds_grad(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    theta: &[f64],
    view: &View,
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    Ok(rfds_parts(field, sched, gen, theta, view, eps, t, cond, cfg)?.0)
}

/// How the network Jacobian enters [`rfds_grad_full`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianTerm {
    /// Exact `∂v̂/∂x_t` through input vector-Jacobian products.
    Exact,
    /// `∂v̂/∂x_t` replaced by the identity.
    Identity,
}

/// Guided input VJP `rᵀ·∂v̂/∂x_t`, with the same branch rule as the
/// guided velocity.
fn guided_input_vjp(
    field: &(impl VelocityField + ?Sized),
    x_t: &[f64],
    t: f64,
    cond: Option<usize>,
    scale: f64,
    r: &[f64],
) -> Result<Vec<f64>> {
    if scale == 1.0 || cond.is_none() {
        return field.input_vjp(x_t, t, cond, r);
    }
    let null = field.input_vjp(x_t, t, None, r)?;
    let c = field.input_vjp(x_t, t, cond, r)?;
    Ok(null.iter().zip(&c).map(|(n, c)| (1.0 - scale) * n + scale * c).collect())
}

/// Exact gradient over `θ` of `‖v̂(α·g(θ) + σ·ε, t) − α̇·g(θ) − σ̇·ε‖²` at
/// fixed `(ε, t, view)`: `2·J_gᵀ[(α·∂v̂/∂x_t − α̇)ᵀ r]`.
pub fn rfds_grad_full(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    theta: &[f64],
    view: &View,
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
    jacobian: JacobianTerm,
) -> Result<Vec<f64>> {
    Ok(rfds_full_parts(field, sched, gen, theta, view, eps, t, cond, cfg, jacobian)?.0)
}

pub(crate) fn rfds_full_parts(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    theta: &[f64],
    view: &View,
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
    jacobian: JacobianTerm,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = gen.render(theta, view)?;
    let r = flow_residual(field, sched, &x, eps, t, cond, cfg.cfg_scale)?;
    let c = sched.eval(t)?;
    let jr = match jacobian {
        JacobianTerm::Exact => {
            let x_t = sched.interpolate(&x, eps, t)?;
            guided_input_vjp(field, &x_t, t, cond, cfg.cfg_scale, &r)?
        }
        JacobianTerm::Identity => r.clone(),
    };
    let up: Vec<f64> = jr.iter().zip(&r).map(|(j, ri)| 2.0 * (c.alpha * j - c.alpha_dot * ri)).collect();
    Ok((gen.vjp(theta, view, &up)?, r))
}

/// Squared deviation of the sample mean from 0 and the population variance
/// from 1, and its gradient.
pub fn gaussian_moment_penalty(eps: &[f64]) -> (f64, Vec<f64>) {
    let d = eps.len() as f64;
    let m = eps.iter().sum::<f64>() / d;
    let var = eps.iter().map(|e| (e - m).powi(2)).sum::<f64>() / d;
    let value = m * m + (var - 1.0).powi(2);
    let grad = eps.iter().map(|e| 2.0 * m / d + 2.0 * (var - 1.0) * 2.0 * (e - m) / d).collect();
    (value, grad)
}

fn add_penalty(mut g: Vec<f64>, eps: &[f64], weight: f64) -> Vec<f64> {
    if weight > 0.0 {
        let (_, pg) = gaussian_moment_penalty(eps);
        g.iter_mut().zip(pg).for_each(|(a, b)| *a += weight * b);
    }
    g
}

/// iRFDS gradient over `ε`: `w'·residual` plus the weighted moment penalty.
pub fn irfds_grad(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    Ok(irfds_parts(field, sched, x, eps, t, cond, cfg, cfg.cfg_scale)?.0)
}

pub(crate) fn irfds_parts(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
    scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = flow_residual(field, sched, x, eps, t, cond, scale)?;
    let g = r.iter().map(|ri| cfg.w_prime_sign * ri).collect();
    Ok((add_penalty(g, eps, cfg.gauss_reg_weight), r))
}

/// Weight applied to the noise residual `ε_φ − ε` on the data side.
///
/// Through the score bridge the flow residual equals `−c·(ε_φ − ε)` with
/// `c = (α̇σ − ασ̇)/α`, so this weight is `−w·sign(c)`: the score-form
/// gradient then points the same way as the velocity-form one. It is `+1`
/// under both default schedules.
pub fn sds_weight(sched: &Schedule, t: f64, cfg: &DistillConfig) -> Result<f64> {
    let c = sched.eval(t)?;
    let k = c.alpha_dot * c.sigma - c.alpha * c.sigma_dot;
    Ok(-cfg.w_sign * k.signum())
}

/// `ε_φ − ε` with `ε_φ = −σ·ŝ(x_t)` and guided `ŝ`.
fn noise_residual(
    score: &(impl ScoreField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    scale: f64,
) -> Result<Vec<f64>> {
    check_dim(x.len(), eps.len())?;
    let c = sched.eval(t)?;
    let x_t = sched.interpolate(x, eps, t)?;
    let s = guided_score(score, &x_t, t, cond, scale)?;
    Ok(s.iter().zip(eps).map(|(si, e)| -c.sigma * si - e).collect())
}

/// Score-distillation gradient over `θ`: `gen.vjp(w_s·(ε_φ − ε))`.
pub fn sds_grad(
    score: &(impl ScoreField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    theta: &[f64],
    view: &View,
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    let x = gen.render(theta, view)?;
    let nr = noise_residual(score, sched, &x, eps, t, cond, cfg.cfg_scale)?;
    let w = sds_weight(sched, t, cfg)?;
    let up: Vec<f64> = nr.iter().map(|v| w * v).collect();
    gen.vjp(theta, view, &up)
}

/// Score-form inversion gradient over `ε`: opposite weight to [`sds_grad`].
pub fn isds_grad(
    score: &(impl ScoreField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    let nr = noise_residual(score, sched, x, eps, t, cond, cfg.cfg_scale)?;
    let w = -sds_weight(sched, t, cfg)?;
    Ok(add_penalty(nr.iter().map(|v| w * v).collect(), eps, cfg.gauss_reg_weight))
}

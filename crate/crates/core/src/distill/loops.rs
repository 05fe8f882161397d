//! RFDS, iRFDS and RFDS-Rev optimization loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::DistillConfig;
use super::generator::Generator;
use super::grad::{irfds_parts, norm, rfds_full_parts, rfds_parts, JacobianTerm};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::interpolant::{sample_uniform, Schedule};
use crate::record::{RunRecord, RunRow};

fn echo(cfg: &DistillConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn step_in_place(x: &mut [f64], g: &[f64], lr: f64, iter: usize, what: &str) -> Result<()> {
    x.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: iter, what: format!("non-finite {what}") });
    }
    Ok(())
}

/// How [`rfds_optimize_with`] forms the parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// `w·J_gᵀ r`, the network Jacobian dropped.
    DropJacobian,
    /// The exact flow-matching gradient, network Jacobian kept.
    KeepJacobian,
}

/// RFDS: each iteration draws `t`, `ε` and a view, then steps
/// `θ ← θ − lr·w·J_gᵀ r`.
pub fn rfds_optimize(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    init: &[f64],
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, RunRecord)> {
    rfds_optimize_with(field, sched, gen, init, cond, cfg, GradientMode::DropJacobian)
}

pub fn rfds_optimize_with(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    init: &[f64],
    cond: Option<usize>,
    cfg: &DistillConfig,
    mode: GradientMode,
) -> Result<(Vec<f64>, RunRecord)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init.to_vec();
    let mut rec = RunRecord::new("rfds", echo(cfg));
    let start = field.counters().snapshot();
    for iter in 0..cfg.max_iters {
        let t = sample_uniform(&mut rng, cfg.t_min, cfg.t_max);
        let eps = normals(&mut rng, gen.out_dim());
        let view = gen.draw_view(&mut rng);
        let (g, r) = match mode {
            GradientMode::DropJacobian => rfds_parts(field, sched, gen, &theta, &view, &eps, t, cond, cfg)?,
            GradientMode::KeepJacobian => {
                rfds_full_parts(field, sched, gen, &theta, &view, &eps, t, cond, cfg, JacobianTerm::Exact)?
            }
        };
        step_in_place(&mut theta, &g, cfg.lr, iter, "parameters")?;
        rec.push(RunRow {
            iter,
            t,
            residual_norm: norm(&r),
            inner_residual_norm: None,
            state: theta.clone(),
            passes: field.counters().snapshot() - start,
        });
    }
    Ok((theta, rec))
}

/// iRFDS: starts from standard-normal `ε` and steps
/// `ε ← ε − lr·(w'·r + λ·∇R(ε))` with `x` held fixed.
pub fn irfds_invert(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, RunRecord)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eps = normals(&mut rng, x.len());
    let mut rec = RunRecord::new("irfds", echo(cfg));
    let start = field.counters().snapshot();
    for iter in 0..cfg.max_iters {
        let t = sample_uniform(&mut rng, cfg.t_min, cfg.t_max);
        let (g, r) = irfds_parts(field, sched, x, &eps, t, cond, cfg, cfg.cfg_scale)?;
        step_in_place(&mut eps, &g, cfg.lr, iter, "noise")?;
        rec.push(RunRow {
            iter,
            t,
            residual_norm: norm(&r),
            inner_residual_norm: None,
            state: eps.clone(),
            passes: field.counters().snapshot() - start,
        });
    }
    Ok((eps, rec))
}

/// RFDS-Rev: per iteration draw `t`, `ε` and a view, refine `ε` with
/// `n_inner` iRFDS steps at `inner_cfg_scale` (θ frozen, step size from the
/// step rule), then take one RFDS step on `θ` with the refined `ε`.
pub fn rfds_rev_optimize(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    gen: &(impl Generator + ?Sized),
    init: &[f64],
    cond: Option<usize>,
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, RunRecord)> {
    cfg.validate_rev()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init.to_vec();
    let mut rec = RunRecord::new("rfds_rev", echo(cfg));
    let start = field.counters().snapshot();
    for iter in 0..cfg.max_iters {
        let t = sample_uniform(&mut rng, cfg.t_min, cfg.t_max);
        let mut eps = normals(&mut rng, gen.out_dim());
        let view = gen.draw_view(&mut rng);
        let x = gen.render(&theta, &view)?;
        let eta = cfg.irfds_step_rule.step(sched, t)?;
        let mut inner = 0.0;
        for _ in 0..cfg.n_inner {
            let (g, r) = irfds_parts(field, sched, &x, &eps, t, cond, cfg, cfg.inner_cfg_scale)?;
            inner = norm(&r);
            step_in_place(&mut eps, &g, eta, iter, "noise")?;
        }
        let (g, r) = rfds_parts(field, sched, gen, &theta, &view, &eps, t, cond, cfg)?;
        step_in_place(&mut theta, &g, cfg.lr, iter, "parameters")?;
        rec.push(RunRow {
            iter,
            t,
            residual_norm: norm(&r),
            inner_residual_norm: Some(inner),
            state: theta.clone(),
            passes: field.counters().snapshot() - start,
        });
    }
    Ok((theta, rec))
}

//! Velocity and score fields, pass counting, and classifier-free guidance.
//!
//! One "pass" is one invocation of the underlying model, whatever the batch
//! size. This matches how per-iteration costs are usually quoted for image
//! models, where a batch of one image is a single network call.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::interpolant::Schedule;

#[derive(Debug, Default)]
pub struct PassCounters {
    forwards: AtomicU64,
    backwards: AtomicU64,
}

/// Plain snapshot of a [`PassCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    pub forwards: u64,
    pub backwards: u64,
}

impl std::ops::Sub for PassCount {
    type Output = PassCount;
    fn sub(self, rhs: Self) -> Self {
        PassCount {
            forwards: self.forwards - rhs.forwards,
            backwards: self.backwards - rhs.backwards,
        }
    }
}

impl PassCounters {
    pub fn forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCount {
        PassCount {
            forwards: self.forwards.load(Ordering::Relaxed),
            backwards: self.backwards.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.backwards.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounters {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        Self { forwards: AtomicU64::new(s.forwards), backwards: AtomicU64::new(s.backwards) }
    }
}

/// Anything mapping `(x_t, t, condition)` to a velocity.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Number of condition labels; 0 for unconditional fields.
    fn num_labels(&self) -> usize;

    /// Evaluates a batch (rows of `x`), one time and one condition per row.
    /// Counts as a single forward pass.
    fn velocity_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        cond: &[Option<usize>],
    ) -> Result<Array2<f64>>;

    fn counters(&self) -> &PassCounters;

    fn velocity(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let out = self.velocity_batch(view, &[t], &[cond])?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Vector-Jacobian product `upstreamᵀ·∂v/∂x_t`. Counts one backward pass.
    fn input_vjp(
        &self,
        _x: &[f64],
        _t: f64,
        _cond: Option<usize>,
        _upstream: &[f64],
    ) -> Result<Vec<f64>> {
        Err(Error::Capability("this velocity field"))
    }
}

/// A score field `∇ log p_t(x)`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn num_labels(&self) -> usize;
    fn score(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>>;
    fn counters(&self) -> &PassCounters;
}

pub(crate) fn check_label(label: Option<usize>, n_labels: usize) -> Result<()> {
    match label {
        Some(l) if l >= n_labels => Err(Error::UnknownLabel { label: l, n_labels }),
        _ => Ok(()),
    }
}

fn combine(null: &[f64], cond: &[f64], scale: f64) -> Vec<f64> {
    null.iter().zip(cond).map(|(n, c)| n + scale * (c - n)).collect()
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("guidance scale must be >= 0, got {scale}")))
    }
}

/// Classifier-free guided velocity `v_null + scale·(v_cond − v_null)`.
///
/// `scale == 1` evaluates the conditional branch only. An absent condition
/// makes both branches identical, so it is evaluated once.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    cond: Option<usize>,
    scale: f64,
) -> Result<Vec<f64>> {
    check_scale(scale)?;
    if scale == 1.0 || cond.is_none() {
        return field.velocity(x, t, cond);
    }
    let v_null = field.velocity(x, t, None)?;
    let v_cond = field.velocity(x, t, cond)?;
    Ok(combine(&v_null, &v_cond, scale))
}

pub fn guided_velocity_batch<F: VelocityField + ?Sized>(
    field: &F,
    x: ArrayView2<f64>,
    t: &[f64],
    cond: &[Option<usize>],
    scale: f64,
) -> Result<Array2<f64>> {
    check_scale(scale)?;
    if scale == 1.0 || cond.iter().all(Option::is_none) {
        return field.velocity_batch(x, t, cond);
    }
    let nulls = vec![None; cond.len()];
    let v_null = field.velocity_batch(x, t, &nulls)?;
    let v_cond = field.velocity_batch(x, t, cond)?;
    Ok(&v_null + &((&v_cond - &v_null) * scale))
}

/// Guided score, same combination rule as [`guided_velocity`].
pub fn guided_score<S: ScoreField + ?Sized>(
    field: &S,
    x: &[f64],
    t: f64,
    cond: Option<usize>,
    scale: f64,
) -> Result<Vec<f64>> {
    check_scale(scale)?;
    if scale == 1.0 || cond.is_none() {
        return field.score(x, t, cond);
    }
    let s_null = field.score(x, t, None)?;
    let s_cond = field.score(x, t, cond)?;
    Ok(combine(&s_null, &s_cond, scale))
}

/// `v ≡ c` everywhere, for every condition.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
    pub n_labels: usize,
    counters: PassCounters,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value, n_labels: 0, counters: PassCounters::default() }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn with_labels(mut self, n_labels: usize) -> Self {
        self.n_labels = n_labels;
        self
    }
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn num_labels(&self) -> usize {
        self.n_labels
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<f64>,
        _t: &[f64],
        cond: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_dim(self.dim(), x.ncols())?;
        for c in cond {
            check_label(*c, self.n_labels)?;
        }
        self.counters.forward();
        let mut out = Array2::zeros(x.raw_dim());
        for mut row in out.rows_mut() {
            row.iter_mut().zip(&self.value).for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }

    fn input_vjp(
        &self,
        x: &[f64],
        _t: f64,
        _cond: Option<usize>,
        _upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.counters.backward();
        Ok(vec![0.0; x.len()])
    }
}

/// Velocity field obtained from a score field through the interpolant
/// relation `v = (α̇/α)·x + (σ/α)(α̇σ − ασ̇)·s`.
pub struct BridgedField<'a, S: ScoreField + ?Sized> {
    pub score: &'a S,
    pub schedule: Schedule,
}

impl<'a, S: ScoreField + ?Sized> BridgedField<'a, S> {
    pub fn new(score: &'a S, schedule: Schedule) -> Self {
        Self { score, schedule }
    }
}

impl<S: ScoreField + ?Sized> VelocityField for BridgedField<'_, S> {
    fn dim(&self) -> usize {
        self.score.dim()
    }

    fn num_labels(&self) -> usize {
        self.score.num_labels()
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        cond: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_dim(self.dim(), x.ncols())?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let xi = row.to_vec();
            let s = self.score.score(&xi, t[i], cond[i])?;
            let v = crate::oracle::score_to_velocity(&self.schedule, &s, &xi, t[i])?;
            out.row_mut(i).iter_mut().zip(v).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }

    fn counters(&self) -> &PassCounters {
        self.score.counters()
    }
}

//! Closed-form velocity and score fields for diagonal Gaussian mixtures.
//!
//! Pushing a mixture `Σ wᵢ N(μᵢ, diag vᵢ)` through `x_t = α·x_* + σ·ε` gives
//! another mixture with means `α·μᵢ` and variances `α²·vᵢ + σ²`, so every
//! conditional expectation the flow needs is available exactly.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{check_dim, Error, Result};
use crate::field::{check_label, PassCounters, ScoreField, VelocityField};
use crate::interpolant::{Coeffs, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-coordinate variances.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be >= 1".into()));
        }
        let mut total = 0.0;
        for c in &components {
            check_dim(d, c.mean.len())?;
            check_dim(d, c.var.len())?;
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Config(format!("component weight {} not positive", c.weight)));
            }
            if c.var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("component variances must be positive".into()));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("component means must be finite".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    /// Single isotropic Gaussian `N(mean, std²·I)`.
    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        let var = vec![std * std; mean.len()];
        Self::new(vec![Component { weight: 1.0, mean, var }])
    }

    /// Equal-weight isotropic mixture with one component per mean.
    pub fn isotropic(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| {
                    let var = vec![std * std; mean.len()];
                    Component { weight: w, mean, var }
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            m.iter_mut().zip(&c.mean).for_each(|(a, b)| *a += c.weight * b);
        }
        m
    }

    /// Draws `(x, component index)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let x = c
            .mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, k)
    }

    /// The mixture restricted to a single component (or itself for `None`).
    fn restricted(&self, cond: Option<usize>) -> Result<std::borrow::Cow<'_, Self>> {
        check_label(cond, self.len())?;
        Ok(match cond {
            None => std::borrow::Cow::Borrowed(self),
            Some(k) => {
                let mut c = self.components[k].clone();
                c.weight = 1.0;
                std::borrow::Cow::Owned(Self { components: vec![c] })
            }
        })
    }

    /// Per-component log-weights `log wᵢ + log N(x; α·μᵢ, α²vᵢ + σ²)` and
    /// normalized responsibilities.
    fn responsibilities(&self, x: &[f64], c: &Coeffs) -> (Vec<f64>, f64) {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|comp| {
                let mut lp = comp.weight.ln();
                for ((xj, mj), vj) in x.iter().zip(&comp.mean).zip(&comp.var) {
                    let var = c.alpha * c.alpha * vj + c.sigma * c.sigma;
                    let d = xj - c.alpha * mj;
                    lp -= 0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
                }
                lp
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        (logs.iter().map(|l| (l - log_norm).exp()).collect(), log_norm)
    }

    /// `log p_t(x)` of the interpolated marginal.
    pub fn log_density_t(&self, sched: &Schedule, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let c = sched.eval(t)?;
        Ok(self.responsibilities(x, &c).1)
    }

    /// `(E[x_* | x_t = x], E[ε | x_t = x])`, both in closed form.
    pub fn posterior(&self, sched: &Schedule, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let c = sched.eval(t)?;
        let (resp, _) = self.responsibilities(x, &c);
        let d = self.dim();
        let mut ex = vec![0.0; d];
        let mut ee = vec![0.0; d];
        for (r, comp) in resp.iter().zip(&self.components) {
            for j in 0..d {
                let var = c.alpha * c.alpha * comp.var[j] + c.sigma * c.sigma;
                let innov = (x[j] - c.alpha * comp.mean[j]) / var;
                ex[j] += r * (comp.mean[j] + c.alpha * comp.var[j] * innov);
                ee[j] += r * c.sigma * innov;
            }
        }
        Ok((ex, ee))
    }
}

/// Exact velocity `α̇·E[x_*|x_t] + σ̇·E[ε|x_t]` of the mixture's flow.
///
/// Both conditional expectations are written without dividing by `α` or
/// `σ`, so the field is finite on all of `[0, 1]`, endpoints included.
pub fn oracle_velocity(
    mix: &GaussianMixture,
    sched: &Schedule,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let c = sched.eval(t)?;
    let (ex, ee) = mix.posterior(sched, x, t)?;
    Ok(ex.iter().zip(&ee).map(|(a, b)| c.alpha_dot * a + c.sigma_dot * b).collect())
}

/// Exact score `∇ log p_t(x)`.
pub fn oracle_score(mix: &GaussianMixture, sched: &Schedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(mix.dim(), x.len())?;
    let c = sched.eval(t)?;
    endpoint_check(&c, t)?;
    let (resp, _) = mix.responsibilities(x, &c);
    let mut s = vec![0.0; mix.dim()];
    for (r, comp) in resp.iter().zip(mix.components()) {
        for j in 0..s.len() {
            let var = c.alpha * c.alpha * comp.var[j] + c.sigma * c.sigma;
            s[j] -= r * (x[j] - c.alpha * comp.mean[j]) / var;
        }
    }
    Ok(s)
}

fn endpoint_check(c: &Coeffs, t: f64) -> Result<()> {
    if c.alpha == 0.0 {
        return Err(Error::Endpoint { t, what: "alpha" });
    }
    if c.sigma == 0.0 {
        return Err(Error::Endpoint { t, what: "sigma" });
    }
    Ok(())
}

/// `v = (α̇/α)·x + (σ/α)(α̇σ − ασ̇)·s`.
pub fn score_to_velocity(sched: &Schedule, s: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), s.len())?;
    let c = sched.eval(t)?;
    if c.alpha == 0.0 {
        return Err(Error::Endpoint { t, what: "alpha" });
    }
    let a = c.alpha_dot / c.alpha;
    let b = score_coefficient(&c);
    Ok(x.iter().zip(s).map(|(xi, si)| a * xi + b * si).collect())
}

/// Inverse of [`score_to_velocity`].
pub fn velocity_to_score(sched: &Schedule, v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), v.len())?;
    let c = sched.eval(t)?;
    if c.alpha == 0.0 {
        return Err(Error::Endpoint { t, what: "alpha" });
    }
    let a = c.alpha_dot / c.alpha;
    let b = score_coefficient(&c);
    if b == 0.0 || !b.is_finite() {
        return Err(Error::SingularConversion { t });
    }
    Ok(x.iter().zip(v).map(|(xi, vi)| (vi - a * xi) / b).collect())
}

/// `(σ/α)(α̇σ − ασ̇)`, the factor multiplying the score in the bridge.
pub(crate) fn score_coefficient(c: &Coeffs) -> f64 {
    (c.sigma / c.alpha) * (c.alpha_dot * c.sigma - c.alpha * c.sigma_dot)
}

/// The mixture as a conditional field. Label `k` selects component `k`;
/// no label means the full mixture.
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    pub mixture: GaussianMixture,
    pub schedule: Schedule,
    counters: PassCounters,
}

impl MixtureOracle {
    pub fn new(mixture: GaussianMixture, schedule: Schedule) -> Self {
        Self { mixture, schedule, counters: PassCounters::default() }
    }

    pub fn posterior(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.mixture.restricted(cond)?.posterior(&self.schedule, x, t)
    }
}

impl VelocityField for MixtureOracle {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn num_labels(&self) -> usize {
        self.mixture.len()
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        cond: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_dim(self.mixture.dim(), x.ncols())?;
        for c in cond {
            check_label(*c, self.mixture.len())?;
        }
        self.counters.forward();
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mix = self.mixture.restricted(cond[i])?;
            let v = oracle_velocity(&mix, &self.schedule, &row.to_vec(), t[i])?;
            out.row_mut(i).iter_mut().zip(v).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }
}

impl ScoreField for MixtureOracle {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn num_labels(&self) -> usize {
        self.mixture.len()
    }

    fn score(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        let mix = self.mixture.restricted(cond)?;
        self.counters.forward();
        oracle_score(&mix, &self.schedule, x, t)
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }
}

/// One-dimensional Gaussian mixture, used as a marginal of [`StraightFlow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Mixture1d {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Config("1-d mixture needs matching, non-empty parameter lists".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("1-d mixture weights and stds must be positive".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("1-d mixture weights must sum to 1".into()));
        }
        Ok(Self { weights, means, stds })
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * std_normal_cdf((x - m) / s)).sum()
    }

    /// Upper tail `1 − F(x)`, computed without cancellation.
    pub fn sf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * std_normal_cdf((m - x) / s)).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * std_normal_pdf((x - m) / s) / s).sum()
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| (*w, *m, *s))
    }

    /// Monotone transport `T = F⁻¹∘Φ` from a standard normal to this mixture.
    ///
    /// Negative inputs match the lower tail `F(x) = Φ(e)`, positive inputs the
    /// upper tail `1 − F(x) = Φ(−e)`, so both tails keep full precision.
    pub fn transport(&self, e: f64) -> f64 {
        if self.weights.len() == 1 {
            return self.means[0] + self.stds[0] * e;
        }
        let smax = self.stds.iter().cloned().fold(0.0, f64::max);
        let lo0 = self.means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi0 = self.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (e.abs() + 10.0) * smax;
        let (mut lo, mut hi) = (lo0 - span, hi0 + span);
        // g(x) increasing in x, root at T(e)
        let g = |x: f64| {
            if e <= 0.0 {
                self.cdf(x) - std_normal_cdf(e)
            } else {
                std_normal_cdf(-e) - self.sf(x)
            }
        };
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let gx = g(x);
            if gx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo < 1e-14 * (1.0 + x.abs()) {
                break;
            }
            let step = gx / self.pdf(x);
            let newton = x - step;
            if step.is_finite() && newton > lo && newton < hi {
                x = newton;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            } else {
                x = 0.5 * (lo + hi);
            }
        }
        x
    }

    /// [`Self::transport`] and its derivative.
    pub fn transport_with_slope(&self, e: f64) -> (f64, f64) {
        if self.weights.len() == 1 {
            return (self.means[0] + self.stds[0] * e, self.stds[0]);
        }
        let x = self.transport(e);
        (x, std_normal_pdf(e) / self.pdf(x))
    }
}

/// Exactly straight flow between `N(0, I)` and a product of 1-d mixtures.
///
/// Each coordinate is coupled to its noise through the monotone map
/// `x_* = T(ε)`, and points move on the segments `α·T(ε) + σ·ε`. Monotone
/// couplings never cross, so this is the fixed point of Reflow for the
/// product distribution: the field a perfectly rectified model would learn.
#[derive(Debug, Clone)]
pub struct StraightFlow {
    pub marginals: Vec<Mixture1d>,
    pub schedule: Schedule,
    counters: PassCounters,
}

impl StraightFlow {
    pub fn new(marginals: Vec<Mixture1d>, schedule: Schedule) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::Config("straight flow needs at least one marginal".into()));
        }
        Ok(Self { marginals, schedule, counters: PassCounters::default() })
    }

    /// Equal-weight modes at `±separation/2` on the first axis, isotropic std
    /// `std`, remaining coordinates `N(0, std²)`. The same distribution as
    /// [`GaussianMixture::isotropic`] with those two means.
    pub fn symmetric_bimodal(dim: usize, separation: f64, std: f64, schedule: Schedule) -> Result<Self> {
        let h = 0.5 * separation;
        let mut marginals = vec![Mixture1d::new(vec![0.5, 0.5], vec![-h, h], vec![std, std])?];
        for _ in 1..dim {
            marginals.push(Mixture1d::gaussian(0.0, std)?);
        }
        Self::new(marginals, schedule)
    }

    /// Noise coordinate whose segment passes through `x` at time `t`.
    fn invert_coord(&self, m: &Mixture1d, x: f64, c: &Coeffs) -> f64 {
        if c.alpha == 0.0 {
            return x / c.sigma;
        }
        if m.weights.len() == 1 {
            return (x - c.alpha * m.means[0]) / (c.alpha * m.stds[0] + c.sigma);
        }
        let (mut lo, mut hi) = (-40.0, 40.0);
        let mut e = if c.sigma > 0.0 { x.clamp(-8.0, 8.0) } else { 0.0 };
        for _ in 0..200 {
            let (tx, slope) = m.transport_with_slope(e);
            let fe = c.alpha * tx + c.sigma * e - x;
            if fe > 0.0 {
                hi = e;
            } else {
                lo = e;
            }
            if hi - lo < 1e-13 {
                break;
            }
            let step = fe / (c.alpha * slope + c.sigma);
            let newton = e - step;
            if newton.is_finite() && newton > lo && newton < hi {
                e = newton;
                if step.abs() < 1e-14 {
                    break;
                }
            } else {
                e = 0.5 * (lo + hi);
            }
        }
        e
    }

    /// Velocity at a single point.
    pub fn velocity_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.marginals.len(), x.len())?;
        let c = self.schedule.eval(t)?;
        Ok(self
            .marginals
            .iter()
            .zip(x)
            .map(|(m, &xi)| {
                let e = self.invert_coord(m, xi, &c);
                c.alpha_dot * m.transport(e) + c.sigma_dot * e
            })
            .collect())
    }

    /// Coupled data point `T(ε)` for a noise vector.
    pub fn transport(&self, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.marginals.len(), eps.len())?;
        Ok(self.marginals.iter().zip(eps).map(|(m, e)| m.transport(*e)).collect())
    }
}

impl VelocityField for StraightFlow {
    fn dim(&self) -> usize {
        self.marginals.len()
    }

    fn num_labels(&self) -> usize {
        0
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        cond: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_dim(self.dim(), x.ncols())?;
        for c in cond {
            check_label(*c, 0)?;
        }
        self.counters.forward();
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let v = self.velocity_at(&row.to_vec(), t[i])?;
            out.row_mut(i).iter_mut().zip(v).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }
}

//! Fixed-step Euler integration of the flow ODE, in both directions.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{guided_velocity_batch, VelocityField};
use crate::interpolant::Schedule;
use crate::net::row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NoiseToData,
    DataToNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub direction: Direction,
    /// Keep every intermediate state. Off by default.
    pub keep_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 1.0, direction: Direction::NoiseToData, keep_trajectory: false }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize, cfg_scale: f64) -> Self {
        Self { steps, cfg_scale, ..Self::default() }
    }

    pub fn inverse(mut self) -> Self {
        self.direction = Direction::DataToNoise;
        self
    }

    pub fn with_trajectory(mut self) -> Self {
        self.keep_trajectory = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }

    fn expect(&self, dir: Direction) -> Result<()> {
        self.validate()?;
        if self.direction != dir {
            return Err(Error::Config(format!("sampler direction must be {dir:?}")));
        }
        Ok(())
    }
}

/// States `(t_k, x_k)` visited by a single-point integration.
pub type Trajectory = Vec<(f64, Vec<f64>)>;

/// Integrates rows of `x` from `t0` to `t1` in `steps` equal Euler steps.
/// Each step costs one guided velocity evaluation for the whole batch.
/// Optionally records the batch state after every step (including the start).
fn integrate(
    field: &(impl VelocityField + ?Sized),
    x: ArrayView2<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    scale: f64,
    cond: &[Option<usize>],
    mut record: Option<&mut Vec<(f64, Array2<f64>)>>,
) -> Result<Array2<f64>> {
    check_dim(field.dim(), x.ncols())?;
    check_dim(x.nrows(), cond.len())?;
    let dt = (t1 - t0) / steps as f64;
    let mut state = x.to_owned();
    if let Some(r) = record.as_deref_mut() {
        r.push((t0, state.clone()));
    }
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let ts = vec![t; state.nrows()];
        let v = guided_velocity_batch(field, state.view(), &ts, cond, scale)?;
        state.scaled_add(dt, &v);
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k });
        }
        if let Some(r) = record.as_deref_mut() {
            let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * dt };
            r.push((t_next, state.clone()));
        }
    }
    Ok(state)
}

fn single_trajectory(rec: Vec<(f64, Array2<f64>)>) -> Trajectory {
    rec.into_iter().map(|(t, x)| (t, x.row(0).to_vec())).collect()
}

/// Noise-to-data Euler sampling from `eps`.
pub fn euler_sample(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    eps: &[f64],
    cfg: &SamplerConfig,
    cond: Option<usize>,
) -> Result<(Vec<f64>, Option<Trajectory>)> {
    cfg.expect(Direction::NoiseToData)?;
    let mut rec = cfg.keep_trajectory.then(Vec::new);
    let out = integrate(
        field,
        row(eps).view(),
        sched.noise_time(),
        sched.data_time(),
        cfg.steps,
        cfg.cfg_scale,
        &[cond],
        rec.as_mut(),
    )?;
    Ok((out.row(0).to_vec(), rec.map(single_trajectory)))
}

/// Data-to-noise integration of the same ODE.
pub fn euler_invert(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: &[f64],
    cfg: &SamplerConfig,
    cond: Option<usize>,
) -> Result<Vec<f64>> {
    cfg.expect(Direction::DataToNoise)?;
    let out = integrate(
        field,
        row(x).view(),
        sched.data_time(),
        sched.noise_time(),
        cfg.steps,
        cfg.cfg_scale,
        &[cond],
        None,
    )?;
    Ok(out.row(0).to_vec())
}

/// Batched [`euler_sample`]: one guided evaluation per step for all rows.
pub fn euler_sample_batch(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    eps: ArrayView2<f64>,
    cfg: &SamplerConfig,
    cond: &[Option<usize>],
) -> Result<Array2<f64>> {
    cfg.expect(Direction::NoiseToData)?;
    integrate(field, eps, sched.noise_time(), sched.data_time(), cfg.steps, cfg.cfg_scale, cond, None)
}

/// Batched [`euler_invert`].
pub fn euler_invert_batch(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    x: ArrayView2<f64>,
    cfg: &SamplerConfig,
    cond: &[Option<usize>],
) -> Result<Array2<f64>> {
    cfg.expect(Direction::DataToNoise)?;
    integrate(field, x, sched.data_time(), sched.noise_time(), cfg.steps, cfg.cfg_scale, cond, None)
}

/// Time reached after travelling `fraction` of the way back from the data
/// endpoint toward the noise endpoint.
pub fn insertion_time(sched: &Schedule, fraction: f64) -> f64 {
    let (tn, td) = (sched.noise_time(), sched.data_time());
    td - fraction * (td - tn)
}

/// Re-noises `source` with `noise` at the insertion time and integrates the
/// remaining path to the data endpoint, possibly under a new condition.
///
/// The remaining interval gets `max(1, round(fraction·steps))` Euler steps,
/// so `fraction = 1` is exactly [`euler_sample`] started at `noise`.
pub fn partial_insert_sample(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    noise: &[f64],
    source: &[f64],
    fraction: f64,
    cfg: &SamplerConfig,
    cond: Option<usize>,
) -> Result<Vec<f64>> {
    cfg.expect(Direction::NoiseToData)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("insertion fraction must lie in (0, 1], got {fraction}")));
    }
    let t_ins = insertion_time(sched, fraction);
    let x_t = sched.interpolate(source, noise, t_ins)?;
    let steps = ((fraction * cfg.steps as f64).round() as usize).max(1);
    let out = integrate(
        field,
        row(&x_t).view(),
        t_ins,
        sched.data_time(),
        steps,
        cfg.cfg_scale,
        &[cond],
        None,
    )?;
    Ok(out.row(0).to_vec())
}

/// Mean squared deviation of the instantaneous velocity from the chord of
/// each trajectory, one value per row of `eps`.
pub fn straightness_batch(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    eps: ArrayView2<f64>,
    steps: usize,
    cond: &[Option<usize>],
) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Config("straightness needs at least 2 steps".into()));
    }
    let (t0, t1) = (sched.noise_time(), sched.data_time());
    let mut rec = Vec::new();
    let end = integrate(field, eps, t0, t1, steps, 1.0, cond, Some(&mut rec))?;
    let chord = (&end - &eps) / (t1 - t0);
    let mut acc = vec![0.0; eps.nrows()];
    for (t, x) in rec.iter().take(steps) {
        let ts = vec![*t; x.nrows()];
        let v = guided_velocity_batch(field, x.view(), &ts, cond, 1.0)?;
        for (i, a) in acc.iter_mut().enumerate() {
            *a += v.row(i).iter().zip(chord.row(i)).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
    }
    Ok(acc.into_iter().map(|a| a / steps as f64).collect())
}

/// Straightness of the single trajectory started at `eps`.
pub fn straightness(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    eps: &[f64],
    steps: usize,
    cond: Option<usize>,
) -> Result<f64> {
    Ok(straightness_batch(field, sched, row(eps).view(), steps, &[cond])?[0])
}

/// Both sides of the Euler step written as an update of the data estimate.
///
/// With `x_t = α_t x_* + σ_t ε` and one step `x_{t+Δt} = x_t + Δt·v`, the new
/// data estimate at fixed `ε` is `x_*' = (x_{t+Δt} − σ_{t+Δt}ε)/α_{t+Δt}`.
/// Returns `((α_{t+Δt}/Δt)(x_*' − x_*), v − α̇x_* − σ̇ε)`; for linear schedules
/// the two agree exactly.
pub fn euler_data_update(
    sched: &Schedule,
    x_star: &[f64],
    eps: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(x_star.len(), v.len())?;
    let x_t = sched.interpolate(x_star, eps, t)?;
    let next = sched.eval(t + dt)?;
    if next.alpha == 0.0 {
        return Err(Error::Endpoint { t: t + dt, what: "alpha" });
    }
    if dt == 0.0 {
        return Err(Error::Config("Euler step must be non-zero".into()));
    }
    let c = sched.eval(t)?;
    let mut lhs = Vec::with_capacity(v.len());
    let mut rhs = Vec::with_capacity(v.len());
    for j in 0..v.len() {
        let x_next = x_t[j] + dt * v[j];
        let x_star_new = (x_next - next.sigma * eps[j]) / next.alpha;
        lhs.push(next.alpha / dt * (x_star_new - x_star[j]));
        rhs.push(v[j] - c.alpha_dot * x_star[j] - c.sigma_dot * eps[j]);
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;
    use crate::oracle::{GaussianMixture, MixtureOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_field_is_integrated_exactly() {
        let f = ConstantField::new(vec![1.5, -0.5]);
        let rf = Schedule::rectified_flow();
        for steps in [1, 3, 17] {
            let (x, _) = euler_sample(&f, &rf, &[0.2, 0.3], &SamplerConfig::new(steps, 1.0), None).unwrap();
            assert!((x[0] - 1.7).abs() < 1e-12 && (x[1] + 0.2).abs() < 1e-12);
            let back = euler_invert(&f, &rf, &x, &SamplerConfig::new(steps, 1.0).inverse(), None).unwrap();
            assert!((back[0] - 0.2).abs() < 1e-12 && (back[1] - 0.3).abs() < 1e-12);
        }
        let zero = ConstantField::zero(2);
        let back = euler_invert(&zero, &rf, &[4.0, 5.0], &SamplerConfig::new(9, 1.0).inverse(), None).unwrap();
        assert_eq!(back, vec![4.0, 5.0]);
    }

    #[test]
    fn direction_is_checked() {
        let f = ConstantField::zero(1);
        let rf = Schedule::rectified_flow();
        assert!(euler_sample(&f, &rf, &[0.0], &SamplerConfig::new(4, 1.0).inverse(), None).is_err());
        assert!(euler_invert(&f, &rf, &[0.0], &SamplerConfig::new(4, 1.0), None).is_err());
        assert!(euler_sample(&f, &rf, &[0.0], &SamplerConfig::new(0, 1.0), None).is_err());
    }

    #[test]
    fn trajectory_has_every_state() {
        let f = ConstantField::new(vec![2.0]);
        let cfm = Schedule::conditional_flow_matching();
        let (x, traj) =
            euler_sample(&f, &cfm, &[1.0], &SamplerConfig::new(4, 1.0).with_trajectory(), None).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.len(), 5);
        assert_eq!(traj[0], (1.0, vec![1.0]));
        assert_eq!(traj[4].0, 0.0);
        // CFM runs t from 1 to 0, so a positive field moves the state down
        assert!((x[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pass_counts_follow_guidance() {
        let f = ConstantField::zero(2).with_labels(2);
        let rf = Schedule::rectified_flow();
        euler_sample(&f, &rf, &[0.0, 0.0], &SamplerConfig::new(10, 3.0), Some(1)).unwrap();
        assert_eq!(f.counters().snapshot().forwards, 20);
        f.counters().reset();
        euler_sample(&f, &rf, &[0.0, 0.0], &SamplerConfig::new(10, 1.0), Some(1)).unwrap();
        assert_eq!(f.counters().snapshot().forwards, 10);
    }

    #[test]
    fn blow_up_names_the_step() {
        let f = ConstantField::new(vec![f64::INFINITY]);
        let rf = Schedule::rectified_flow();
        let err = euler_sample(&f, &rf, &[0.0], &SamplerConfig::new(5, 1.0), None).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: 0 }));
    }

    #[test]
    fn oracle_samples_have_the_right_moments() {
        let mix = GaussianMixture::new(vec![crate::oracle::Component {
            weight: 1.0,
            mean: vec![1.0, -2.0],
            var: vec![0.25, 2.0],
        }])
        .unwrap();
        let rf = Schedule::rectified_flow();
        let oracle = MixtureOracle::new(mix, rf);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let x = euler_sample_batch(&oracle, &rf, eps.view(), &SamplerConfig::new(1000, 1.0), &vec![None; n]).unwrap();
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let var = x.var_axis(ndarray::Axis(0), 1.0);
        let (mu, v) = ([1.0, -2.0], [0.25, 2.0]);
        for j in 0..2 {
            let se_m = (v[j] / n as f64).sqrt();
            assert!((mean[j] - mu[j]).abs() < 3.0 * se_m, "mean {mean}");
            let se_v = v[j] * (2.0 / (n - 1) as f64).sqrt();
            assert!((var[j] - v[j]).abs() < 3.0 * se_v, "var {var}");
        }
    }

    #[test]
    fn round_trip_error_shrinks_with_steps() {
        let mix = GaussianMixture::isotropic(vec![vec![2.0, 0.0], vec![-2.0, 0.5]], 0.5).unwrap();
        let rf = Schedule::rectified_flow();
        let oracle = MixtureOracle::new(mix, rf);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 64;
        let eps = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let conds = vec![None; n];
        let mut prev = f64::INFINITY;
        for steps in [8, 16, 32, 64, 128, 256] {
            let x = euler_sample_batch(&oracle, &rf, eps.view(), &SamplerConfig::new(steps, 1.0), &conds).unwrap();
            let back =
                euler_invert_batch(&oracle, &rf, x.view(), &SamplerConfig::new(steps, 1.0).inverse(), &conds).unwrap();
            let err = (&back - &eps).mapv(|v| v * v).sum().sqrt() / n as f64;
            assert!(err < prev, "steps {steps}: {err} >= {prev}");
            prev = err;
        }
    }

    #[test]
    fn partial_insertion_limits() {
        let mix = GaussianMixture::isotropic(vec![vec![2.0, 0.0], vec![-2.0, 0.5]], 0.5).unwrap();
        for sched in [Schedule::rectified_flow(), Schedule::conditional_flow_matching()] {
            let oracle = MixtureOracle::new(mix.clone(), sched);
            let cfg = SamplerConfig::new(20, 1.0);
            let noise = [0.3, -1.2];
            let source = [1.9, 0.1];
            let full = partial_insert_sample(&oracle, &sched, &noise, &source, 1.0, &cfg, Some(1)).unwrap();
            let (direct, _) = euler_sample(&oracle, &sched, &noise, &cfg, Some(1)).unwrap();
            assert_eq!(full, direct);
            let tiny = partial_insert_sample(&oracle, &sched, &noise, &source, 1e-6, &cfg, Some(1)).unwrap();
            assert!((tiny[0] - source[0]).abs() < 1e-4 && (tiny[1] - source[1]).abs() < 1e-4);
            assert!(partial_insert_sample(&oracle, &sched, &noise, &source, 0.0, &cfg, None).is_err());
        }
    }

    #[test]
    fn straightness_cases() {
        let rf = Schedule::rectified_flow();
        let f = ConstantField::new(vec![0.7, 0.1]);
        assert!(straightness(&f, &rf, &[0.1, 0.2], 10, None).unwrap() < 1e-24);
        let mix = GaussianMixture::gaussian(vec![1.0, 1.0], 0.3).unwrap();
        let oracle = MixtureOracle::new(mix, rf);
        assert!(straightness(&oracle, &rf, &[0.1, 0.2], 10, None).unwrap() > 0.0);
        assert!(straightness(&f, &rf, &[0.1, 0.2], 1, None).is_err());
    }

    #[test]
    fn euler_update_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sched in [Schedule::rectified_flow(), Schedule::conditional_flow_matching()] {
            for _ in 0..200 {
                let g = |r: &mut ChaCha8Rng| r.sample::<f64, _>(StandardNormal);
                let xs = [g(&mut rng), g(&mut rng)];
                let e = [g(&mut rng), g(&mut rng)];
                let v = [g(&mut rng), g(&mut rng)];
                let t = 0.1 + 0.8 * rng.random::<f64>();
                let dt = 0.05 * (rng.random::<f64>() - 0.5);
                let (l, r) = euler_data_update(&sched, &xs, &e, &v, t, dt).unwrap();
                for j in 0..2 {
                    assert!((l[j] - r[j]).abs() <= 1e-9);
                }
            }
        }
    }
}

//! Flow-matching training, Adam, and Reflow fine-tuning.

use ndarray::{Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::interpolant::Schedule;
use crate::net::{NetArch, VelocityNet};
use crate::oracle::GaussianMixture;
use crate::sampler::{euler_sample_batch, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            steps: 20_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout must lie in [0, 1), got {}", self.cond_dropout)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs decay rates in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Source of labelled training points.
pub trait DataSampler {
    fn dim(&self) -> usize;
    /// Number of labels; 0 for unlabelled data.
    fn num_labels(&self) -> usize;
    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> (Array2<f64>, Vec<Option<usize>>);
}

/// Component index is the label.
impl DataSampler for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn num_labels(&self) -> usize {
        self.len()
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> (Array2<f64>, Vec<Option<usize>>) {
        let mut x = Array2::zeros((n, GaussianMixture::dim(self)));
        let mut labels = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let (p, k) = self.sample(rng);
            row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
            labels.push(Some(k));
        }
        (x, labels)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Trained network plus the per-step mean squared regression loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: VelocityNet,
    pub losses: Vec<f64>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// One Adam step of flow matching on a prepared batch. Returns the loss.
fn fm_step(
    net: &mut VelocityNet,
    opt: &mut Adam,
    sched: &Schedule,
    x_star: &Array2<f64>,
    eps: &Array2<f64>,
    labels: &[Option<usize>],
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let n = x_star.nrows();
    let ts: Vec<f64> = (0..n).map(|_| sched.sample_time(rng)).collect();
    let mut x_t = Array2::zeros(x_star.raw_dim());
    let mut target = Array2::zeros(x_star.raw_dim());
    for i in 0..n {
        let c = sched.eval(ts[i])?;
        for j in 0..x_star.ncols() {
            x_t[[i, j]] = c.alpha * x_star[[i, j]] + c.sigma * eps[[i, j]];
            target[[i, j]] = c.alpha_dot * x_star[[i, j]] + c.sigma_dot * eps[[i, j]];
        }
    }
    let mut loss = 0.0;
    let (_, grad) = net.value_and_param_grad(x_t.view(), &ts, labels, |out| {
        let diff = out - &target;
        loss = diff.mapv(|v| v * v).sum() / n as f64;
        diff * (2.0 / n as f64)
    })?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, what: format!("loss {loss}") });
    }
    opt.update(net.params_mut(), &grad);
    if !net.all_params_finite() {
        return Err(Error::Divergence { step, what: "non-finite parameters".into() });
    }
    Ok(loss)
}

/// Regresses a fresh network onto `α̇·x_* + σ̇·ε` at `x_t = α·x_* + σ·ε`,
/// with independent `ε`, uniform `t` on the schedule's range, and labels
/// replaced by the null label with probability `cond_dropout`.
pub fn train_flow_matching(
    sched: &Schedule,
    data: &dyn DataSampler,
    arch: &NetArch,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let mut net = VelocityNet::new(data.dim(), data.num_labels(), arch.clone(), sched.kind, cfg.seed)?;
    let mut opt = Adam::new(net.num_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x_star, mut labels) = data.sample_batch(&mut rng, cfg.batch);
        for l in labels.iter_mut() {
            if rng.random::<f64>() < cfg.cond_dropout {
                *l = None;
            }
        }
        let eps = normal_matrix(&mut rng, cfg.batch, data.dim());
        losses.push(fm_step(&mut net, &mut opt, sched, &x_star, &eps, &labels, &mut rng, step)?);
    }
    Ok(Trained { net, losses })
}

/// Noise/sample couplings produced by a trained sampler.
#[derive(Debug, Clone)]
pub struct ReflowPairs {
    pub eps: Array2<f64>,
    pub x: Array2<f64>,
    pub labels: Vec<Option<usize>>,
}

/// Draws `n_pairs` noises and integrates them through `net`.
///
/// Labels are uniform over the net's labels; a `cond_dropout` fraction of the
/// pairs is generated unconditionally so the null label gets its own coupling.
pub fn reflow_pairs(
    net: &VelocityNet,
    sched: &Schedule,
    n_pairs: usize,
    sampler: &SamplerConfig,
    cond_dropout: f64,
    seed: u64,
) -> Result<ReflowPairs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = net.dim();
    let eps = normal_matrix(&mut rng, n_pairs, d);
    let labels: Vec<Option<usize>> = (0..n_pairs)
        .map(|_| {
            let drop = rng.random::<f64>() < cond_dropout;
            if net.num_labels() == 0 || drop {
                None
            } else {
                Some(rng.random_range(0..net.num_labels()))
            }
        })
        .collect();
    let mut x = Array2::zeros((n_pairs, d));
    // chunked so the cost stays one pass per step per chunk
    let chunk = 4096;
    for start in (0..n_pairs).step_by(chunk) {
        let end = (start + chunk).min(n_pairs);
        let out = euler_sample_batch(
            net,
            sched,
            eps.slice(ndarray::s![start..end, ..]),
            sampler,
            &labels[start..end],
        )?;
        x.slice_mut(ndarray::s![start..end, ..]).assign(&out);
    }
    Ok(ReflowPairs { eps, x, labels })
}

/// Fine-tunes a copy of `net` on coupled pairs with the flow-matching loss.
pub fn reflow_on_pairs(
    net: &VelocityNet,
    sched: &Schedule,
    pairs: &ReflowPairs,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let mut out = net.clone();
    let n = pairs.eps.nrows();
    if n == 0 {
        return Ok(Trained { net: out, losses: vec![] });
    }
    let mut opt = Adam::new(out.num_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let x_star = pairs.x.select(Axis(0), &idx);
        let eps = pairs.eps.select(Axis(0), &idx);
        let labels: Vec<Option<usize>> = idx.iter().map(|&i| pairs.labels[i]).collect();
        losses.push(fm_step(&mut out, &mut opt, sched, &x_star, &eps, &labels, &mut rng, step)?);
    }
    Ok(Trained { net: out, losses })
}

/// Generates `n_pairs` couplings with `sample_steps` Euler steps at CFG
/// `reflow_cfg` and fine-tunes on them. `n_pairs = 0` returns `net` unchanged.
pub fn reflow_finetune(
    net: &VelocityNet,
    sched: &Schedule,
    n_pairs: usize,
    sample_steps: usize,
    reflow_cfg: f64,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if n_pairs == 0 {
        return Ok(Trained { net: net.clone(), losses: vec![] });
    }
    let sampler = SamplerConfig::new(sample_steps, reflow_cfg);
    let pairs = reflow_pairs(net, sched, n_pairs, &sampler, cfg.cond_dropout, cfg.seed ^ 0x5e_ed0f_7e10)?;
    reflow_on_pairs(net, sched, &pairs, cfg)
}

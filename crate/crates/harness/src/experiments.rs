//! Experiment runners. Each writes its config echo, CSV records, SVG plots
//! and a `summary.json` into its run directory.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfprior::distill::{
    irfds_invert, rfds_optimize_with, rfds_rev_optimize, sds_grad, DistillConfig, Generator, GradientMode, Identity,
    Linear, RotationView, View,
};
use rfprior::oracle::{oracle_score, oracle_velocity, score_to_velocity};
use rfprior::sampler::{
    euler_invert_batch, euler_sample_batch, partial_insert_sample, straightness_batch, Trajectory,
};
use rfprior::{
    euler_sample, reflow_finetune, train_flow_matching, DataSampler, GaussianMixture, MixtureOracle, PassCount,
    RunRecord, SamplerConfig, Schedule, ScoreField, StraightFlow, TrainConfig, VelocityField, VelocityNet,
};
use serde_json::{json, Value};

use crate::config::{Experiment, FieldSource, GeneratorKind, RunConfig};
use crate::metrics::{energy_distance, energy_permutation_test, mmd_rbf};
use crate::output::{xy, RunDir};
use crate::plot::{color, Plot};

pub struct Outcome {
    pub dir: RunDir,
    pub summary: Value,
}

/// Runs `cfg.experiment` in `cfg.run_dir()`.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    run_in(cfg, RunDir::create(cfg.run_dir())?)
}

pub fn run_in(cfg: &RunConfig, dir: RunDir) -> Result<Outcome> {
    cfg.validate()?;
    dir.write_text("config.toml", &cfg.to_toml())?;
    let summary = match cfg.experiment {
        Experiment::Train => train(cfg, &dir)?,
        Experiment::Reflow => reflow(cfg, &dir)?,
        Experiment::Sample => sample(cfg, &dir)?,
        Experiment::Invert => invert(cfg, &dir)?,
        Experiment::Rfds => distill(cfg, &dir, Method::Rfds)?,
        Experiment::RfdsRev => distill(cfg, &dir, Method::RfdsRev)?,
        Experiment::IrfdsEdit => irfds_edit(cfg, &dir)?,
        Experiment::BridgeCheck => bridge_check(cfg, &dir)?,
        Experiment::BenchCost => bench_cost(cfg, &dir)?,
        Experiment::JacobianAblation => jacobian_ablation(cfg, &dir)?,
    };
    dir.write_json("summary.json", &summary)?;
    Ok(Outcome { dir, summary })
}

// ---------------------------------------------------------------- building

pub fn build_field(cfg: &RunConfig, sched: &Schedule) -> Result<Box<dyn VelocityField>> {
    Ok(match cfg.field.source {
        FieldSource::Oracle => Box::new(MixtureOracle::new(cfg.dataset.mixture()?, *sched)),
        FieldSource::Checkpoint => Box::new(load_net(cfg)?),
        FieldSource::StraightBimodal => Box::new(StraightFlow::symmetric_bimodal(
            2,
            2.0 * cfg.field.bimodal_offset,
            cfg.field.bimodal_std,
            *sched,
        )?),
    })
}

fn load_net(cfg: &RunConfig) -> Result<VelocityNet> {
    let net = VelocityNet::load(&cfg.field.checkpoint)
        .with_context(|| format!("loading checkpoint {:?}", cfg.field.checkpoint))?;
    if net.schedule_kind() != cfg.schedule.kind {
        bail!(
            "checkpoint was trained under {} but the run uses {}",
            net.schedule_kind().as_str(),
            cfg.schedule.kind.as_str()
        );
    }
    Ok(net)
}

/// The checkpoint when one is named, otherwise a freshly trained net.
fn net_or_train(cfg: &RunConfig, sched: &Schedule, dir: &RunDir) -> Result<VelocityNet> {
    if !cfg.field.checkpoint.is_empty() {
        return load_net(cfg);
    }
    let ds = cfg.dataset.build()?;
    let trained = train_flow_matching(sched, &ds, &cfg.net, &cfg.train)?;
    dir.write_losses("losses.csv", &trained.losses)?;
    Ok(trained.net)
}

pub fn build_generator(cfg: &RunConfig, out_dim: usize) -> Result<Box<dyn Generator>> {
    Ok(match cfg.generator.kind {
        GeneratorKind::Identity => Box::new(Identity { dim: out_dim }),
        GeneratorKind::Rotation => Box::new(RotationView::new(out_dim, cfg.generator.max_angle)?),
        GeneratorKind::Linear => Box::new(Linear::seeded(cfg.generator.param_dim, out_dim, cfg.seed)),
    })
}

/// Mode centres of the field's target distribution, when known.
pub fn mode_centres(cfg: &RunConfig) -> Vec<Vec<f64>> {
    match cfg.field.source {
        FieldSource::StraightBimodal => {
            let m = cfg.field.bimodal_offset;
            vec![vec![m, 0.0], vec![-m, 0.0]]
        }
        _ => cfg.dataset.mixture().map(|m| m.components().iter().map(|c| c.mean.clone()).collect()).unwrap_or_default(),
    }
}

pub fn nearest_mode_distance(x: &[f64], centres: &[Vec<f64>]) -> f64 {
    centres
        .iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Label rule shared by sampling and distillation: `label >= 0` is used as
/// is, `-1` draws uniformly from the field's labels, anything lower (or a
/// field without labels) means unconditional.
pub fn pick_label(label: i64, n_labels: usize, rng: &mut impl Rng) -> Option<usize> {
    match label {
        l if l >= 0 => Some(l as usize),
        -1 if n_labels > 0 => Some(rng.random_range(0..n_labels)),
        _ => None,
    }
}

pub fn normal_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

fn labels_for(label: i64, n_labels: usize, n: usize, seed: u64) -> Vec<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pick_label(label, n_labels, &mut rng)).collect()
}

// ---------------------------------------------------------------- analysis

/// Relative round-trip errors `‖invert(sample(ε)) − ε‖/‖ε‖`, one per row.
pub fn round_trip_errors(
    field: &(impl VelocityField + ?Sized),
    sched: &Schedule,
    eps: &Array2<f64>,
    labels: &[Option<usize>],
    steps: usize,
    cfg_scale: f64,
) -> Result<Vec<f64>> {
    let x = euler_sample_batch(field, sched, eps.view(), &SamplerConfig::new(steps, cfg_scale), labels)?;
    let back = euler_invert_batch(field, sched, x.view(), &SamplerConfig::new(steps, cfg_scale).inverse(), labels)?;
    Ok(eps
        .rows()
        .into_iter()
        .zip(back.rows())
        .map(|(e, b)| {
            let num = e.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            num / e.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn passes_json(p: Option<(f64, f64)>) -> Value {
    match p {
        Some((f, b)) => json!({ "forwards_per_iter": f, "backwards_per_iter": b }),
        None => Value::Null,
    }
}

fn scatter_plot(title: &str, data: &Array2<f64>, samples: &Array2<f64>) -> Plot {
    let mut p = Plot::new(title).labels("x_0", "x_1").equal_aspect();
    p.points(xy(data), "#999999", 1.5, 0.4);
    p.points(xy(samples), color(0), 1.5, 0.6);
    p
}

fn trajectory_plot(title: &str, trajs: &[Trajectory]) -> Plot {
    let mut p = Plot::new(title).labels("x_0", "x_1").equal_aspect();
    for (k, tr) in trajs.iter().enumerate() {
        let pts: Vec<(f64, f64)> = tr.iter().map(|(_, x)| (x[0], x.get(1).copied().unwrap_or(0.0))).collect();
        p.line(pts.clone(), color(k), 1.0);
        if let Some(&last) = pts.last() {
            p.points(vec![last], color(k), 2.5, 1.0);
        }
    }
    p
}

fn loss_plot(losses: &[f64]) -> Plot {
    let mut p = Plot::new("training loss (window mean)").labels("step", "loss").wide();
    let win = (losses.len() / 500).max(1);
    let pts: Vec<(f64, f64)> = losses
        .chunks(win)
        .enumerate()
        .map(|(i, c)| ((i * win) as f64, c.iter().sum::<f64>() / c.len() as f64))
        .collect();
    p.line(pts, color(0), 1.2);
    p
}

/// Rendered trace of one distillation run, at most 400 points.
fn theta_trace(rec: &RunRecord, gen: &dyn Generator) -> Vec<(f64, f64)> {
    let stride = (rec.rows.len() / 400).max(1);
    rec.rows
        .iter()
        .step_by(stride)
        .chain(rec.rows.last())
        .filter_map(|r| gen.render(&r.state, &View::default()).ok())
        .map(|x| (x[0], x.get(1).copied().unwrap_or(0.0)))
        .collect()
}

/// Energy test of a sample against a held-out draw of the dataset.
fn sample_quality(cfg: &RunConfig, samples: &Array2<f64>) -> Result<Value> {
    let ds = cfg.dataset.build()?;
    let (held, _) = ds.sample(cfg.dataset.n_eval, cfg.seed ^ 0x4_e1d0u64);
    let test = energy_permutation_test(samples.view(), held.view(), 200, 0.95, cfg.seed);
    Ok(json!({
        "energy_distance": test.statistic,
        "energy_threshold_95": test.threshold,
        "energy_p_value": test.p_value,
        "below_threshold": test.below_threshold(),
        "mmd_rbf": mmd_rbf(samples.view(), held.view(), None),
    }))
}

// ---------------------------------------------------------------- runners

fn train(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let ds = cfg.dataset.build()?;
    let trained = train_flow_matching(&sched, &ds, &cfg.net, &cfg.train)?;
    trained.net.save(dir.file("net.ckpt"))?;
    dir.write_losses("losses.csv", &trained.losses)?;
    dir.write_svg("loss.svg", &loss_plot(&trained.losses))?;
    let n = cfg.sampler.n_samples;
    let eps = normal_matrix(n, ds.dim(), cfg.seed ^ 0xe95);
    let labels = labels_for(cfg.sampler.label, ds.num_labels(), n, cfg.seed ^ 0x1abe1);
    let samples = euler_sample_batch(
        &trained.net,
        &sched,
        eps.view(),
        &SamplerConfig::new(cfg.sampler.steps, cfg.sampler.cfg_scale),
        &labels,
    )?;
    dir.write_samples("samples.csv", &samples, &labels)?;
    let (held, _) = ds.sample(n, cfg.seed ^ 0x4_e1d0u64);
    dir.write_svg("samples.svg", &scatter_plot("samples vs data", &held, &samples))?;
    let tail = &trained.losses[trained.losses.len().saturating_sub(100)..];
    Ok(json!({
        "experiment": "train",
        "steps": cfg.train.steps,
        "final_loss": mean(tail),
        "num_params": trained.net.num_params(),
        "samples": sample_quality(cfg, &samples)?,
    }))
}

fn reflow(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let base = net_or_train(cfg, &sched, dir)?;
    let ft = TrainConfig { steps: cfg.reflow.steps, lr: cfg.reflow.lr, ..cfg.train.clone() };
    let out = reflow_finetune(&base, &sched, cfg.reflow.n_pairs, cfg.reflow.sample_steps, cfg.reflow.cfg_scale, &ft)?;
    out.net.save(dir.file("reflow.ckpt"))?;
    base.save(dir.file("base.ckpt"))?;
    dir.write_losses("reflow_losses.csv", &out.losses)?;
    dir.write_svg("reflow_loss.svg", &loss_plot(&out.losses))?;
    let d = base.dim();
    let eps = normal_matrix(256, d, cfg.seed ^ 0x57a1);
    let labels = labels_for(cfg.sampler.label, base.num_labels(), 256, cfg.seed ^ 0x1abe1);
    let mut report = BTreeMap::new();
    for (name, net) in [("pre", &base), ("post", &out.net)] {
        let s = straightness_batch(net, &sched, eps.view(), cfg.sampler.steps, &labels)?;
        let rt = round_trip_errors(net, &sched, &eps, &labels, cfg.sampler.steps, 1.0)?;
        let k = cfg.sampler.n_trajectories.min(256);
        let trajs = (0..k)
            .map(|i| {
                let e = eps.row(i).to_vec();
                let sc = SamplerConfig::new(cfg.sampler.steps, 1.0).with_trajectory();
                euler_sample(net, &sched, &e, &sc, labels[i]).map(|(_, tr)| tr.unwrap_or_default())
            })
            .collect::<rfprior::Result<Vec<_>>>()?;
        dir.write_trajectories(&format!("trajectories_{name}.csv"), &trajs)?;
        dir.write_svg(&format!("trajectories_{name}.svg"), &trajectory_plot(&format!("{name}-Reflow trajectories"), &trajs))?;
        report.insert(name, json!({ "straightness": mean(&s), "round_trip_median": median(&rt) }));
    }
    Ok(json!({ "experiment": "reflow", "n_pairs": cfg.reflow.n_pairs, "report": report }))
}

fn sample(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let field = build_field(cfg, &sched)?;
    let n = cfg.sampler.n_samples;
    let eps = normal_matrix(n, field.dim(), cfg.seed ^ 0xe95);
    let labels = labels_for(cfg.sampler.label, field.num_labels(), n, cfg.seed ^ 0x1abe1);
    let sc = SamplerConfig::new(cfg.sampler.steps, cfg.sampler.cfg_scale);
    let start = field.counters().snapshot();
    let samples = euler_sample_batch(&*field, &sched, eps.view(), &sc, &labels)?;
    let passes = field.counters().snapshot() - start;
    let trajs = (0..cfg.sampler.n_trajectories.min(n))
        .map(|i| {
            euler_sample(&*field, &sched, &eps.row(i).to_vec(), &sc.with_trajectory(), labels[i])
                .map(|(_, t)| t.unwrap_or_default())
        })
        .collect::<rfprior::Result<Vec<_>>>()?;
    dir.write_samples("samples.csv", &samples, &labels)?;
    dir.write_trajectories("trajectories.csv", &trajs)?;
    let (held, _) = cfg.dataset.build()?.sample(n, cfg.seed ^ 0x4_e1d0u64);
    dir.write_svg("samples.svg", &scatter_plot("samples vs data", &held, &samples))?;
    dir.write_svg("trajectories.svg", &trajectory_plot("sampling trajectories", &trajs))?;
    Ok(json!({
        "experiment": "sample",
        "n_samples": n,
        "forwards": passes.forwards,
        "samples": sample_quality(cfg, &samples)?,
    }))
}

fn invert(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let field = build_field(cfg, &sched)?;
    let n = cfg.sampler.n_samples;
    let eps = normal_matrix(n, field.dim(), cfg.seed ^ 0xe95);
    let labels = labels_for(cfg.sampler.label, field.num_labels(), n, cfg.seed ^ 0x1abe1);
    let rt = round_trip_errors(&*field, &sched, &eps, &labels, cfg.sampler.steps, cfg.sampler.cfg_scale)?;
    let sc = SamplerConfig::new(cfg.sampler.steps, cfg.sampler.cfg_scale);
    let x = euler_sample_batch(&*field, &sched, eps.view(), &sc, &labels)?;
    // iRFDS on the first few points
    let k = cfg.runs.n_seeds.min(n);
    let mut rows = Vec::with_capacity(k);
    let mut recon = Vec::with_capacity(k);
    for (i, &label) in labels.iter().enumerate().take(k) {
        let xi = x.row(i).to_vec();
        let dcfg = DistillConfig { seed: cfg.distill.seed.wrapping_add(i as u64), ..cfg.distill.clone() };
        let (e_hat, rec) = irfds_invert(&*field, &sched, &xi, label, &dcfg)?;
        let (x_hat, _) = euler_sample(&*field, &sched, &e_hat, &sc, label)?;
        let err = xi.iter().zip(&x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        dir.child(&format!("point_{i}"))?.write_record("record.csv", &rec, xi.len())?;
        recon.push(err);
        rows.push(x_hat);
    }
    let mut w = csv::Writer::from_path(dir.file("round_trip.csv"))?;
    w.write_record(["index", "relative_error"])?;
    for (i, e) in rt.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    let recon_arr = Array2::from_shape_fn((rows.len(), field.dim()), |(i, j)| rows[i][j]);
    let mut p = Plot::new("iRFDS reconstructions").labels("x_0", "x_1").equal_aspect();
    p.points(xy(&x.slice(ndarray::s![..k, ..]).to_owned()), color(0), 3.0, 0.8);
    p.points(xy(&recon_arr), color(3), 2.0, 0.8);
    dir.write_svg("reconstructions.svg", &p)?;
    Ok(json!({
        "experiment": "invert",
        "round_trip_median": median(&rt),
        "irfds_reconstruction_median": median(&recon),
        "irfds_points": k,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rfds,
    RfdsRev,
    RfdsKeepJacobian,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rfds => "rfds",
            Method::RfdsRev => "rfds-rev",
            Method::RfdsKeepJacobian => "rfds-keep-jacobian",
        }
    }
}

/// One seeded distillation run: initial θ and label come from `seed`.
pub struct SeedRun {
    pub seed: u64,
    pub label: Option<usize>,
    pub init: Vec<f64>,
    pub result: Result<(Vec<f64>, RunRecord), rfprior::Error>,
}

pub fn seeded_runs(
    cfg: &RunConfig,
    field: &dyn VelocityField,
    sched: &Schedule,
    gen: &dyn Generator,
    method: Method,
) -> Vec<SeedRun> {
    (0..cfg.runs.n_seeds as u64)
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init: Vec<f64> = if cfg.runs.init.is_empty() {
                (0..gen.param_dim()).map(|_| rng.random_range(cfg.runs.init_low..cfg.runs.init_high)).collect()
            } else {
                cfg.runs.init.clone()
            };
            let label = pick_label(cfg.field.label, field.num_labels(), &mut rng);
            let dcfg = DistillConfig { seed, ..cfg.distill.clone() };
            let result = match method {
                Method::Rfds => rfds_optimize_with(field, sched, gen, &init, label, &dcfg, GradientMode::DropJacobian),
                Method::RfdsKeepJacobian => {
                    rfds_optimize_with(field, sched, gen, &init, label, &dcfg, GradientMode::KeepJacobian)
                }
                Method::RfdsRev => rfds_rev_optimize(field, sched, gen, &init, label, &dcfg),
            };
            SeedRun { seed, label, init, result }
        })
        .collect()
}

/// Writes per-seed records and a θ-trace plot; returns the summary block.
fn report_runs(
    cfg: &RunConfig,
    dir: &RunDir,
    runs: &[SeedRun],
    gen: &dyn Generator,
    method: Method,
    plot_name: &str,
) -> Result<Value> {
    let centres = mode_centres(cfg);
    let mut reached = 0usize;
    let mut finished = 0usize;
    let mut residuals = vec![];
    let mut finals = vec![];
    let mut per_seed = vec![];
    let mut passes = None;
    let mut plot = Plot::new(format!("{} θ traces", method.name())).labels("x_0", "x_1").equal_aspect();
    for c in &centres {
        plot.points(vec![(c[0], c.get(1).copied().unwrap_or(0.0))], "#999999", 5.0, 0.5);
    }
    for (k, run) in runs.iter().enumerate() {
        let sub = dir.child(&format!("seed_{}", run.seed))?;
        match &run.result {
            Ok((theta, rec)) => {
                finished += 1;
                sub.write_record("record.csv", rec, theta.len())?;
                let x = gen.render(theta, &View::default())?;
                let d = nearest_mode_distance(&x, &centres);
                if d <= cfg.runs.delta {
                    reached += 1;
                }
                let res = rec.tail_residual(0.1).unwrap_or(f64::NAN);
                residuals.push(res);
                finals.push(x.clone());
                passes = passes.or(rec.passes_per_iter());
                plot.line(theta_trace(rec, gen), color(k), 1.0);
                per_seed.push(json!({
                    "seed": run.seed, "label": run.label, "init": run.init, "final": x,
                    "mode_distance": d, "terminal_residual": res,
                }));
            }
            Err(e) => {
                sub.write_text("error.txt", &format!("{e}\n"))?;
                per_seed.push(json!({ "seed": run.seed, "label": run.label, "init": run.init, "error": e.to_string() }));
            }
        }
    }
    dir.write_svg(plot_name, &plot)?;
    let finals_arr = Array2::from_shape_fn((finals.len(), gen.out_dim()), |(i, j)| finals[i][j]);
    let energy = if finals.len() >= 2 {
        let (held, _) = cfg.dataset.build()?.sample(cfg.dataset.n_eval.min(1000), cfg.seed ^ 0x4_e1d0u64);
        if held.ncols() == finals_arr.ncols() {
            Some(energy_distance(finals_arr.view(), held.view()))
        } else {
            None
        }
    } else {
        None
    };
    Ok(json!({
        "method": method.name(),
        "n_seeds": runs.len(),
        "completed": finished,
        "mode_reach_fraction": reached as f64 / runs.len() as f64,
        "mean_terminal_residual": if residuals.is_empty() { f64::NAN } else { mean(&residuals) },
        "terminal_energy_distance": energy,
        "passes": passes_json(passes),
        "runs": per_seed,
    }))
}

fn distill(cfg: &RunConfig, dir: &RunDir, method: Method) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let field = build_field(cfg, &sched)?;
    let gen = build_generator(cfg, field.dim())?;
    let runs = seeded_runs(cfg, &*field, &sched, &*gen, method);
    let report = report_runs(cfg, dir, &runs, &*gen, method, "theta_trace.svg")?;
    if let Some(e) = runs.iter().find_map(|r| r.result.as_ref().err()) {
        dir.write_json("summary.json", &report)?;
        bail!("{} diverged: {e}", method.name());
    }
    Ok(report)
}

fn irfds_edit(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let field = build_field(cfg, &sched)?;
    let d = field.dim();
    let lab = |l: i64| usize::try_from(l).ok();
    let (src, tgt) = (lab(cfg.edit.source_label), lab(cfg.edit.target_label));
    let sc = SamplerConfig::new(cfg.sampler.steps, cfg.sampler.cfg_scale);
    let edit_sc = SamplerConfig::new(cfg.edit.steps, cfg.edit.cfg_scale);
    let eps = normal_matrix(cfg.runs.n_seeds, d, cfg.seed ^ 0xe95);
    let mut w = csv::Writer::from_path(dir.file("edits.csv"))?;
    let mut header = vec!["index".to_string()];
    for p in ["source", "reconstruction", "edit"] {
        header.extend((0..d).map(|j| format!("{p}_{j}")));
    }
    w.write_record(&header)?;
    let mut plot = Plot::new("iRFDS edits").labels("x_0", "x_1").equal_aspect();
    let (mut rec_err, mut moved) = (vec![], vec![]);
    for i in 0..cfg.runs.n_seeds {
        let (x, _) = euler_sample(&*field, &sched, &eps.row(i).to_vec(), &sc, src)?;
        let dcfg = DistillConfig { seed: cfg.distill.seed.wrapping_add(i as u64), ..cfg.distill.clone() };
        let (e_hat, rec) = irfds_invert(&*field, &sched, &x, src, &dcfg)?;
        dir.child(&format!("point_{i}"))?.write_record("record.csv", &rec, d)?;
        let (x_rec, _) = euler_sample(&*field, &sched, &e_hat, &sc, src)?;
        let x_edit = partial_insert_sample(&*field, &sched, &e_hat, &x, cfg.edit.fraction, &edit_sc, tgt)?;
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        rec_err.push(dist(&x, &x_rec));
        moved.push(dist(&x, &x_edit));
        let mut row = vec![i.to_string()];
        row.extend(x.iter().chain(&x_rec).chain(&x_edit).map(|v| v.to_string()));
        w.write_record(&row)?;
        plot.line(vec![(x[0], x[1]), (x_edit[0], x_edit[1])], "#999999", 0.8);
        plot.points(vec![(x[0], x[1])], color(0), 3.0, 0.9);
        plot.points(vec![(x_edit[0], x_edit[1])], color(3), 3.0, 0.9);
    }
    w.flush()?;
    dir.write_svg("edits.svg", &plot)?;
    Ok(json!({
        "experiment": "irfds-edit",
        "reconstruction_median": median(&rec_err),
        "edit_displacement_median": median(&moved),
        "fraction": cfg.edit.fraction,
        "edit_steps": cfg.edit.steps,
        "edit_cfg_scale": cfg.edit.cfg_scale,
    }))
}

/// Largest `|score_to_velocity(oracle_score) − oracle_velocity|` over
/// `n` random `(x, t)` with `t ∈ [0.05, 0.95]`.
pub fn max_bridge_error(mix: &GaussianMixture, sched: &Schedule, n: usize, seed: u64) -> rfprior::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.random_range(0.05..0.95);
        let x: Vec<f64> = (0..mix.dim()).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = oracle_score(mix, sched, &x, t)?;
        let v = score_to_velocity(sched, &s, &x, t)?;
        let o = oracle_velocity(mix, sched, &x, t)?;
        worst = v.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// The two reference oracles: a single Gaussian and a 3-component mixture.
pub fn bridge_oracles() -> Vec<(&'static str, GaussianMixture)> {
    use rfprior::oracle::Component;
    let three = GaussianMixture::new(vec![
        Component { weight: 0.5, mean: vec![2.0, 0.0], var: vec![0.09, 0.25] },
        Component { weight: 0.3, mean: vec![-1.0, 1.5], var: vec![0.5, 0.04] },
        Component { weight: 0.2, mean: vec![0.0, -2.5], var: vec![0.2, 0.2] },
    ])
    .expect("valid mixture");
    vec![("gaussian", GaussianMixture::gaussian(vec![0.5, -1.0], 0.7).expect("valid")), ("mixture3", three)]
}

fn bridge_check(cfg: &RunConfig, _dir: &RunDir) -> Result<Value> {
    let mut out = BTreeMap::new();
    let mut worst = 0.0f64;
    for kind in [rfprior::ScheduleKind::RectifiedFlow, rfprior::ScheduleKind::ConditionalFlowMatching] {
        let sched = Schedule::of_kind(kind);
        for (name, mix) in bridge_oracles() {
            let e = max_bridge_error(&mix, &sched, 100, cfg.seed)?;
            worst = worst.max(e);
            out.insert(format!("{}/{name}", kind.as_str()), e);
        }
    }
    println!("max bridge error: {worst:.3e}");
    Ok(json!({ "experiment": "bridge-check", "max_bridge_error": worst, "per_case": out, "tolerance": 1e-8 }))
}

/// Forward/backward passes per iteration of every method under the default
/// presets, measured with the oracle's counters.
pub fn cost_table(mix: &GaussianMixture, sched: &Schedule, iters: usize, seed: u64) -> Result<BTreeMap<String, PassCount>> {
    let oracle = MixtureOracle::new(mix.clone(), *sched);
    let gen = Identity { dim: mix.dim() };
    let init = vec![0.1; mix.dim()];
    let gcfg = DistillConfig { max_iters: iters, seed, ..DistillConfig::generation(sched) };
    let icfg = DistillConfig { max_iters: iters, seed, ..DistillConfig::inversion(sched) };
    let cond = Some(0);
    let per_iter = |rec: &RunRecord| {
        let last = rec.rows.last().map(|r| r.passes).unwrap_or_default();
        PassCount { forwards: last.forwards / iters as u64, backwards: last.backwards / iters as u64 }
    };
    let mut table = BTreeMap::new();
    let (_, rec) = rfds_optimize_with(&oracle, sched, &gen, &init, cond, &gcfg, GradientMode::DropJacobian)?;
    table.insert("rfds".to_string(), per_iter(&rec));
    let (_, rec) = rfds_rev_optimize(&oracle, sched, &gen, &init, cond, &gcfg)?;
    table.insert("rfds-rev".to_string(), per_iter(&rec));
    let (_, rec) = irfds_invert(&oracle, sched, &init, cond, &icfg)?;
    table.insert("irfds".to_string(), per_iter(&rec));
    let counters = ScoreField::counters(&oracle);
    counters.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iters {
        let t = rng.random_range(sched.t_min..sched.t_max);
        let eps: Vec<f64> = (0..mix.dim()).map(|_| rng.sample(StandardNormal)).collect();
        sds_grad(&oracle, sched, &gen, &init, &View::default(), &eps, t, cond, &gcfg)?;
    }
    let s = counters.snapshot();
    table.insert(
        "sds".to_string(),
        PassCount { forwards: s.forwards / iters as u64, backwards: s.backwards / iters as u64 },
    );
    Ok(table)
}

fn bench_cost(cfg: &RunConfig, _dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let mix = cfg.dataset.mixture().unwrap_or_else(|_| crate::dataset::ring_mixture());
    let table = cost_table(&mix, &sched, cfg.bench.iters.max(1), cfg.seed)?;
    let rows: BTreeMap<&String, Value> =
        table.iter().map(|(k, p)| (k, json!({ "forwards": p.forwards, "backwards": p.backwards }))).collect();
    for (k, p) in &table {
        println!("{k:<10} forwards {} backwards {}", p.forwards, p.backwards);
    }
    Ok(json!({ "experiment": "bench-cost", "cfg_scale": DistillConfig::generation(&sched).cfg_scale, "per_iteration": rows }))
}

fn jacobian_ablation(cfg: &RunConfig, dir: &RunDir) -> Result<Value> {
    let sched = cfg.schedule.build()?;
    let net = net_or_train(cfg, &sched, dir)?;
    let gen = build_generator(cfg, net.dim())?;
    let mut out = BTreeMap::new();
    for (method, sub) in [(Method::Rfds, "drop"), (Method::RfdsKeepJacobian, "keep")] {
        let sdir = dir.child(sub)?;
        let runs = seeded_runs(cfg, &net, &sched, &*gen, method);
        let report = report_runs(cfg, &sdir, &runs, &*gen, method, "theta_trace.svg")?;
        dir.write_svg(&format!("theta_{sub}.svg"), &{
            let mut p = Plot::new(format!("{} Jacobian: θ traces", sub)).labels("x_0", "x_1").equal_aspect();
            let (held, _) = cfg.dataset.build()?.sample(500, cfg.seed ^ 0x4_e1d0u64);
            p.points(xy(&held), "#bbbbbb", 1.2, 0.5);
            for (k, r) in runs.iter().enumerate() {
                if let Ok((_, rec)) = &r.result {
                    p.line(theta_trace(rec, &*gen), color(k), 1.0);
                }
            }
            p
        })?;
        out.insert(sub, report);
    }
    let energies: BTreeMap<&str, Value> =
        out.iter().map(|(k, v)| (*k, v["terminal_energy_distance"].clone())).collect();
    println!("terminal energy distance: {}", serde_json::to_string(&energies)?);
    Ok(json!({ "experiment": "jacobian-ablation", "terminal_energy_distance": energies, "variants": out }))
}

/// Column means, for quick summaries of point clouds.
pub fn column_means(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

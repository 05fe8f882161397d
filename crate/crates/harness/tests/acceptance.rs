//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfprior::distill::{
    irfds_invert, rfds_grad, rfds_grad_full, rfds_optimize, rfds_rev_optimize, sds_grad, DistillConfig, Generator,
    Identity, JacobianTerm, Linear, View,
};
use rfprior::distill::flow_residual;
use rfprior::field::BridgedField;
use rfprior::sampler::{euler_data_update, euler_sample_batch, straightness_batch};
use rfprior::{
    euler_sample, reflow_finetune, train_flow_matching, Activation, MixtureOracle, NetArch, SamplerConfig, Schedule,
    ScheduleKind, StraightFlow, TrainConfig, VelocityNet,
};
use rfprior_harness::config::{Experiment, FieldSource, RunConfig};
use rfprior_harness::dataset::{ring_centers, ring_mixture, Dataset, DatasetKind, RING_STD};
use rfprior_harness::experiments::{
    bridge_oracles, cost_table, max_bridge_error, mean, median, nearest_mode_distance, normal_matrix,
    round_trip_errors, run_in,
};
use rfprior_harness::metrics::energy_permutation_test;
use rfprior_harness::output::RunDir;

const BASELINE: &str = include_str!("baseline.toml");

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, ok: bool, detail: String, elapsed: Duration) {
        if !ok {
            self.failures += 1;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

fn baseline(key: &str) -> f64 {
    let t: toml::Table = BASELINE.parse().expect("baseline.toml parses");
    t[key].as_float().unwrap_or_else(|| panic!("baseline key {key}"))
}

fn c1_bridge(rep: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::RectifiedFlow, ScheduleKind::ConditionalFlowMatching] {
        for (_, mix) in bridge_oracles() {
            worst = worst.max(max_bridge_error(&mix, &Schedule::of_kind(kind), 100, 1).unwrap());
        }
    }
    let el = start.elapsed();
    let ok = worst <= 1e-8 && el < Duration::from_secs(1);
    rep.line(1, "bridge identity", ok, format!("max |Δv| = {worst:.2e} (tol 1e-8)"), el);
}

fn c2_rfds_is_sds(rep: &mut Report) {
    let start = Instant::now();
    let mix = bridge_oracles().remove(1).1;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_cos, mut worst_ratio) = (1.0f64, 0.0f64);
    for k in 0..100 {
        let sched = if k % 2 == 0 { Schedule::rectified_flow() } else { Schedule::conditional_flow_matching() };
        let oracle = MixtureOracle::new(mix.clone(), sched);
        let bridged = BridgedField::new(&oracle, sched);
        let cfg = DistillConfig::generation(&sched);
        let gen = Identity { dim: 2 };
        let (th, e) = (normals(&mut rng, 2), normals(&mut rng, 2));
        let t = rng.random_range(0.05..0.95);
        let cond = Some(k % 3);
        let a = rfds_grad(&bridged, &sched, &gen, &th, &View::default(), &e, t, cond, &cfg).unwrap();
        let b = sds_grad(&oracle, &sched, &gen, &th, &View::default(), &e, t, cond, &cfg).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_cos = worst_cos.min(dot / (na * nb));
        // coordinate ratios relative to the least-squares ratio
        let rho = dot / (nb * nb);
        for (p, q) in a.iter().zip(&b) {
            if q.abs() > 1e-3 * nb {
                worst_ratio = worst_ratio.max((p / q - rho).abs() / rho.abs());
            }
        }
    }
    let el = start.elapsed();
    let ok = worst_cos >= 1.0 - 1e-6 && worst_ratio <= 1e-6 && el < Duration::from_secs(1);
    rep.line(
        2,
        "RFDS equals SDS",
        ok,
        format!("min cosine 1 - {:.1e}, max ratio deviation {worst_ratio:.1e}", 1.0 - worst_cos),
        el,
    );
}

fn c3_full_gradient(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let n_nets = 24;
    for k in 0..n_nets {
        let width = [8, 16, 32][k % 3];
        let act = if k % 4 == 0 { Activation::Tanh } else { Activation::Silu };
        let arch = NetArch { hidden: vec![width, width], n_freq: 4, embed_dim: 4, activation: act };
        let sched = if k % 2 == 0 { Schedule::rectified_flow() } else { Schedule::conditional_flow_matching() };
        let mut net = VelocityNet::new(2, 3, arch, sched.kind, k as u64).unwrap();
        // untrained nets have a zero output layer; give every parameter a value
        for p in net.params_mut() {
            *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let gen = Linear::seeded(3, 2, k as u64);
        let cfg = DistillConfig { cfg_scale: [1.0, 7.5, 50.0][k % 3], ..DistillConfig::generation(&sched) };
        let (th, e) = (normals(&mut rng, 3), normals(&mut rng, 2));
        let t = rng.random_range(0.05..0.95);
        let cond = Some(k % 3);
        let g = rfds_grad_full(&net, &sched, &gen, &th, &View::default(), &e, t, cond, &cfg, JacobianTerm::Exact).unwrap();
        let loss = |th: &[f64]| {
            let x = gen.render(th, &View::default()).unwrap();
            flow_residual(&net, &sched, &x, &e, t, cond, cfg.cfg_scale).unwrap().iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..3)
            .map(|i| {
                let (mut p, mut m) = (th.clone(), th.clone());
                p[i] += h;
                m[i] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().chain(&g).fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        let err = fd.iter().zip(&g).fold(0.0f64, |a, (p, q)| a.max((p - q).abs())) / scale;
        worst = worst.max(err);
    }
    let el = start.elapsed();
    let ok = worst <= 1e-4 && el < Duration::from_secs(10);
    rep.line(3, "full-gradient correctness", ok, format!("{n_nets} nets, max relative error {worst:.2e}"), el);
}

fn c4_euler_identity(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for sched in [Schedule::rectified_flow(), Schedule::conditional_flow_matching()] {
        for _ in 0..1000 {
            let (xs, e, v) = (normals(&mut rng, 2), normals(&mut rng, 2), normals(&mut rng, 2));
            let t = rng.random_range(0.05..0.9);
            let dt = rng.random_range(0.001..0.05) * if sched.kind == ScheduleKind::RectifiedFlow { 1.0 } else { -1.0 };
            let (lhs, rhs) = euler_data_update(&sched, &xs, &e, &v, t, dt).unwrap();
            worst = worst.max(lhs.iter().zip(&rhs).fold(0.0f64, |a, (p, q)| a.max((p - q).abs())));
        }
    }
    let el = start.elapsed();
    let ok = worst <= 1e-9 && el < Duration::from_secs(1);
    rep.line(4, "Euler identity", ok, format!("max |lhs - rhs| = {worst:.2e}"), el);
}

fn ring_labels(n: usize, seed: u64) -> Vec<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Some(rng.random_range(0..8))).collect()
}

fn c5_training(rep: &mut Report, rf: &Schedule) -> VelocityNet {
    let start = Instant::now();
    let ds = Dataset::new(DatasetKind::GaussianRing8);
    let trained = train_flow_matching(rf, &ds, &NetArch::default(), &TrainConfig::default()).unwrap();
    let train_time = start.elapsed();
    let eps = normal_matrix(2000, 2, 7);
    let labels = ring_labels(2000, 8);
    let xs = euler_sample_batch(&trained.net, rf, eps.view(), &SamplerConfig::new(50, 1.0), &labels).unwrap();
    let (held, _) = ds.sample(2000, 999);
    let test = energy_permutation_test(xs.view(), held.view(), 200, 0.95, 1);
    let ok = train_time <= Duration::from_secs(600) && test.below_threshold();
    rep.line(
        5,
        "training sanity",
        ok,
        format!(
            "20k steps in {:.0}s; energy distance {:.4} vs 95% threshold {:.4} (p = {:.3})",
            train_time.as_secs_f64(),
            test.statistic,
            test.threshold,
            test.p_value
        ),
        start.elapsed(),
    );
    trained.net
}

fn c6_reflow(rep: &mut Report, rf: &Schedule, base: &VelocityNet) -> VelocityNet {
    let start = Instant::now();
    let cfg = TrainConfig { steps: 10_000, lr: 1e-3, seed: 1, ..TrainConfig::default() };
    let re = reflow_finetune(base, rf, 20_000, 100, 1.0, &cfg).unwrap().net;
    let eps = normal_matrix(256, 2, 11);
    let labels: Vec<Option<usize>> = (0..256).map(|i| Some(i % 8)).collect();
    let s_pre = mean(&straightness_batch(base, rf, eps.view(), 50, &labels).unwrap());
    let s_post = mean(&straightness_batch(&re, rf, eps.view(), 50, &labels).unwrap());
    let rt_pre = median(&round_trip_errors(base, rf, &eps, &labels, 50, 1.0).unwrap());
    let rt_post = median(&round_trip_errors(&re, rf, &eps, &labels, 50, 1.0).unwrap());
    let ok = s_post < s_pre && rt_post <= 0.05 && rt_pre > rt_post;
    rep.line(
        6,
        "Reflow straightening",
        ok,
        format!("straightness {s_pre:.4} -> {s_post:.4}; round-trip median {rt_pre:.4} -> {rt_post:.4} (tol 0.05)"),
        start.elapsed(),
    );
    re
}

/// Median reconstruction error and median distance between two inversions
/// of the same point, over 16 points.
fn inversion_stats(net: &VelocityNet, rf: &Schedule) -> (f64, f64) {
    let sc = SamplerConfig::new(50, 1.0);
    let eps = normal_matrix(16, 2, 77);
    let (mut rec, mut spread) = (vec![], vec![]);
    for i in 0..16 {
        let label = Some(i % 8);
        let (x, _) = euler_sample(net, rf, &eps.row(i).to_vec(), &sc, label).unwrap();
        let hats: Vec<Vec<f64>> = (0..2u64)
            .map(|s| {
                let cfg = DistillConfig { seed: 1000 + 2 * i as u64 + s, ..DistillConfig::inversion(rf) };
                irfds_invert(net, rf, &x, label, &cfg).unwrap().0
            })
            .collect();
        let (x_hat, _) = euler_sample(net, rf, &hats[0], &sc, label).unwrap();
        rec.push(dist(&x_hat, &x));
        spread.push(dist(&hats[0], &hats[1]));
    }
    (median(&rec), median(&spread))
}

fn c7_inversion(rep: &mut Report, rf: &Schedule, base: &VelocityNet, re: &VelocityNet) {
    let start = Instant::now();
    let (rec_post, spread_post) = inversion_stats(re, rf);
    let (_, spread_pre) = inversion_stats(base, rf);
    let threshold = baseline("irfds_reconstruction_threshold");
    let ok = rec_post < threshold && spread_post < spread_pre;
    rep.line(
        7,
        "iRFDS inversion",
        ok,
        format!(
            "reconstruction median {rec_post:.4} (threshold {threshold}); inversion spread {spread_post:.4} Reflow vs {spread_pre:.4} base"
        ),
        start.elapsed(),
    );
}

fn c8_rfds_ring(rep: &mut Report, rf: &Schedule) {
    let start = Instant::now();
    let oracle = MixtureOracle::new(ring_mixture(), *rf);
    let centres = ring_centers();
    let delta = 3.0 * RING_STD;
    let mut reached = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let k = rng.random_range(0..8);
        let cfg = DistillConfig { t_min: 0.6, seed, ..DistillConfig::generation(rf) };
        let (th, _) = rfds_optimize(&oracle, rf, &Identity { dim: 2 }, &init, Some(k), &cfg).unwrap();
        if nearest_mode_distance(&th, &centres) <= delta {
            reached += 1;
        }
    }
    let ok = reached as f64 / 50.0 >= 0.9;
    rep.line(8, "RFDS on the ring oracle", ok, format!("{reached}/50 within 3σ of a mode (need 45)"), start.elapsed());
}

fn c9_rfds_rev(rep: &mut Report, rf: &Schedule) {
    let start = Instant::now();
    let m = 1.0;
    let flow = StraightFlow::symmetric_bimodal(2, 2.0 * m, 0.2, *rf).unwrap();
    let centres = vec![vec![m, 0.0], vec![-m, 0.0]];
    let gen = Identity { dim: 2 };
    let (mut hit_a, mut hit_b, mut res_a, mut res_b) = (0, 0, vec![], vec![]);
    for seed in 0..50u64 {
        let cfg = DistillConfig { cfg_scale: 1.0, lr: 1e-2, seed, ..DistillConfig::generation(rf) };
        let (ta, ra) = rfds_optimize(&flow, rf, &gen, &[0.0, 0.0], None, &cfg).unwrap();
        let (tb, rb) = rfds_rev_optimize(&flow, rf, &gen, &[0.0, 0.0], None, &cfg.clone().for_reflow()).unwrap();
        hit_a += (nearest_mode_distance(&ta, &centres) <= 0.6) as usize;
        hit_b += (nearest_mode_distance(&tb, &centres) <= 0.6) as usize;
        res_a.push(ra.tail_residual(0.1).unwrap());
        res_b.push(rb.tail_residual(0.1).unwrap());
    }
    let (ma, mb) = (mean(&res_a), mean(&res_b));
    let ok = hit_b > hit_a && mb < ma;
    rep.line(
        9,
        "RFDS-Rev improvement",
        ok,
        format!("mode reached RFDS {hit_a}/50, RFDS-Rev {hit_b}/50; terminal residual {ma:.3} vs {mb:.3}"),
        start.elapsed(),
    );
}

fn c10_cost(rep: &mut Report, rf: &Schedule) {
    let start = Instant::now();
    let table = cost_table(&ring_mixture(), rf, 10, 0).unwrap();
    let want = [("rfds", 2, 0), ("irfds", 1, 0), ("rfds-rev", 3, 0), ("sds", 2, 0)];
    let ok = want.iter().all(|(k, f, b)| table[*k].forwards == *f && table[*k].backwards == *b);
    let detail = want
        .iter()
        .map(|(k, _, _)| format!("{k} {}/{}", table[*k].forwards, table[*k].backwards))
        .collect::<Vec<_>>()
        .join(", ");
    rep.line(10, "cost table", ok, detail, start.elapsed());
}

fn c11_ablation(rep: &mut Report, base: &VelocityNet) {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ring.ckpt");
    base.save(&ckpt).unwrap();
    let mut cfg = RunConfig::defaults(Experiment::JacobianAblation, ScheduleKind::RectifiedFlow);
    cfg.field.source = FieldSource::Checkpoint;
    cfg.field.checkpoint = ckpt.display().to_string();
    let dir = RunDir::create(tmp.path().join("run")).unwrap();
    let out = run_in(&cfg, dir);
    let (ok, detail) = match out {
        Ok(o) => {
            let files = ["summary.json", "theta_drop.svg", "theta_keep.svg", "drop/theta_trace.svg", "keep/theta_trace.svg"];
            let emitted = files.iter().all(|f| o.dir.file(f).exists());
            let e = &o.summary["terminal_energy_distance"];
            (emitted, format!("report emitted; terminal energy distance drop {} keep {}", e["drop"], e["keep"]))
        }
        Err(e) => (false, format!("run failed: {e:#}")),
    };
    rep.line(11, "Jacobian ablation", ok, detail, start.elapsed());
}

fn main() {
    let mut rep = Report { failures: 0 };
    let rf = Schedule::rectified_flow();
    c1_bridge(&mut rep);
    c2_rfds_is_sds(&mut rep);
    c3_full_gradient(&mut rep);
    c4_euler_identity(&mut rep);
    let base = c5_training(&mut rep, &rf);
    let re = c6_reflow(&mut rep, &rf, &base);
    c7_inversion(&mut rep, &rf, &base, &re);
    c8_rfds_ring(&mut rep, &rf);
    c9_rfds_rev(&mut rep, &rf);
    c10_cost(&mut rep, &rf);
    c11_ablation(&mut rep, &base);
    println!("acceptance: {} of 11 criteria passed", 11 - rep.failures);
    if rep.failures > 0 {
        std::process::exit(1);
    }
}

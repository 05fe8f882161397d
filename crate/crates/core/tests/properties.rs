use proptest::prelude::*;
use rfprior::oracle::{oracle_score, oracle_velocity, score_to_velocity, velocity_to_score, Component};
use rfprior::{guided_velocity, GaussianMixture, MixtureOracle, Schedule, StraightFlow};

fn schedule(cfm: bool) -> Schedule {
    if cfm {
        Schedule::conditional_flow_matching()
    } else {
        Schedule::rectified_flow()
    }
}

fn mixture() -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec((0.1f64..1.0, -3.0f64..3.0, -3.0f64..3.0, 0.05f64..1.5, 0.05f64..1.5), 1..4).prop_map(|cs| {
        let total: f64 = cs.iter().map(|c| c.0).sum();
        GaussianMixture::new(
            cs.into_iter()
                .map(|(w, m0, m1, v0, v1)| Component { weight: w / total, mean: vec![m0, m1], var: vec![v0, v1] })
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn bridge_holds_on_random_mixtures(
        mix in mixture(), x0 in -4.0f64..4.0, x1 in -4.0f64..4.0, t in 0.05f64..0.95, cfm in any::<bool>()
    ) {
        let sched = schedule(cfm);
        let x = [x0, x1];
        let s = oracle_score(&mix, &sched, &x, t).unwrap();
        let v = score_to_velocity(&sched, &s, &x, t).unwrap();
        let o = oracle_velocity(&mix, &sched, &x, t).unwrap();
        for j in 0..2 {
            prop_assert!((v[j] - o[j]).abs() <= 1e-8 * (1.0 + o[j].abs()));
        }
    }

    #[test]
    fn score_velocity_conversions_are_inverse(
        s0 in -5.0f64..5.0, s1 in -5.0f64..5.0, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0,
        t in 0.05f64..0.95, cfm in any::<bool>()
    ) {
        let sched = schedule(cfm);
        let x = [x0, x1];
        let v = score_to_velocity(&sched, &[s0, s1], &x, t).unwrap();
        let back = velocity_to_score(&sched, &v, &x, t).unwrap();
        prop_assert!((back[0] - s0).abs() < 1e-9 && (back[1] - s1).abs() < 1e-9);
    }

    #[test]
    fn guidance_is_affine_in_the_scale(
        x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, t in 0.05f64..0.95, s in 0.0f64..60.0, k in 0usize..2
    ) {
        let mix = GaussianMixture::isotropic(vec![vec![2.0, 0.0], vec![-2.0, 1.0]], 0.4).unwrap();
        let rf = Schedule::rectified_flow();
        let o = MixtureOracle::new(mix, rf);
        let x = [x0, x1];
        let null = guided_velocity(&o, &x, t, None, 1.0).unwrap();
        let cond = guided_velocity(&o, &x, t, Some(k), 1.0).unwrap();
        let g = guided_velocity(&o, &x, t, Some(k), s).unwrap();
        for j in 0..2 {
            let want = null[j] + s * (cond[j] - null[j]);
            prop_assert!((g[j] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn straight_flow_is_monotone_and_straight(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 0.05f64..0.95) {
        let rf = Schedule::rectified_flow();
        let f = StraightFlow::symmetric_bimodal(1, 2.0, 0.25, rf).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let (tl, th) = (f.transport(&[lo]).unwrap()[0], f.transport(&[hi]).unwrap()[0]);
        prop_assert!(tl < th);
        // on the segment from ε to T(ε) the velocity is the chord
        let x_t = (1.0 - t) * a + t * f.transport(&[a]).unwrap()[0];
        let v = f.velocity_at(&[x_t], t).unwrap()[0];
        let chord = f.transport(&[a]).unwrap()[0] - a;
        prop_assert!((v - chord).abs() < 1e-6 * (1.0 + chord.abs()), "v {} chord {}", v, chord);
    }
}

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfprior_harness::metrics::{energy_distance, energy_permutation_test};

fn normal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 2), |_| rng.sample(StandardNormal))
}

#[test]
fn same_law_at_ten_thousand_points_is_below_the_permutation_threshold() {
    // too large for the cached matrix, so this also covers the streaming path;
    // 19 relabellings give an exact 5% level test
    let (a, b) = (normal(10_000, 1), normal(10_000, 2));
    let test = energy_permutation_test(a.view(), b.view(), 19, 0.95, 3);
    assert!(test.below_threshold(), "{test:?}");
    assert!(test.statistic.abs() < 0.01);
}

#[test]
fn cached_and_streaming_paths_agree() {
    let (a, b) = (normal(300, 4), normal(200, 5));
    let direct = energy_distance(a.view(), b.view());
    let test = energy_permutation_test(a.view(), b.view(), 10, 0.95, 1);
    assert!((direct - test.statistic).abs() < 1e-5);
}

//! Two-sample statistics: energy distance with a permutation test, and an
//! RBF-kernel MMD.

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean of pairwise distances within one sample, excluding the diagonal.
fn within(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(a.row(i), a.row(j));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

fn across(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            s += dist(x, y);
        }
    }
    s / (a.nrows() * b.nrows()) as f64
}

/// Unbiased energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖`, with the
/// within-sample terms averaged over distinct pairs only.
///
/// # Panics
/// If either sample is empty or the dimensions differ.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    assert!(a.nrows() > 0 && b.nrows() > 0, "energy distance needs non-empty samples");
    assert_eq!(a.ncols(), b.ncols(), "dimension mismatch");
    2.0 * across(a, b) - within(a) - within(b)
}

#[derive(Debug, Clone, Serialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// Upper `level` quantile of the statistic under random relabelling.
    pub threshold: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

impl PermutationTest {
    pub fn below_threshold(&self) -> bool {
        self.statistic < self.threshold
    }
}

/// Pooled samples above this size are not cached as a distance matrix;
/// distances are recomputed on every permutation instead.
const MATRIX_LIMIT: usize = 8000;

/// Energy distance from the within-A, within-B and cross pair sums.
fn from_sums(saa: f64, sbb: f64, sab: f64, na: usize, nb: usize) -> f64 {
    let wa = if na > 1 { 2.0 * saa / (na * (na - 1)) as f64 } else { 0.0 };
    let wb = if nb > 1 { 2.0 * sbb / (nb * (nb - 1)) as f64 } else { 0.0 };
    2.0 * sab / (na * nb) as f64 - wa - wb
}

/// Pair sums for the labelling `in_a`, with `d(i, j, k)` giving the distance
/// of pair `i < j` whose packed upper-triangle index is `k`.
fn sums(in_a: &[bool], d: impl Fn(usize, usize, usize) -> f64) -> (f64, f64, f64) {
    let n = in_a.len();
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    let mut k = 0;
    for i in 0..n {
        let ai = in_a[i];
        let (mut same, mut cross) = (0.0, 0.0);
        for (j, &aj) in in_a.iter().enumerate().skip(i + 1) {
            let v = d(i, j, k);
            k += 1;
            if aj == ai {
                same += v;
            } else {
                cross += v;
            }
        }
        if ai {
            saa += same;
        } else {
            sbb += same;
        }
        sab += cross;
    }
    (saa, sbb, sab)
}

/// Energy-distance permutation test. The pooled distance matrix is computed
/// once when it fits, so each permutation costs one pass over the pairs.
///
/// # Panics
/// If either sample is empty or the dimensions differ.
pub fn energy_permutation_test(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_permutations: usize,
    level: f64,
    seed: u64,
) -> PermutationTest {
    assert!(a.nrows() > 0 && b.nrows() > 0, "energy distance needs non-empty samples");
    let pooled = ndarray::concatenate(Axis(0), &[a, b]).expect("same dimension");
    let n = pooled.nrows();
    let (na, nb) = (a.nrows(), b.nrows());
    let cache: Option<Vec<f32>> = (n <= MATRIX_LIMIT).then(|| {
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(dist(pooled.row(i), pooled.row(j)) as f32);
            }
        }
        d
    });
    let stat_for = |in_a: &[bool]| {
        let (saa, sbb, sab) = match &cache {
            Some(d) => sums(in_a, |_, _, k| d[k] as f64),
            None => sums(in_a, |i, j, _| dist(pooled.row(i), pooled.row(j))),
        };
        from_sums(saa, sbb, sab, na, nb)
    };
    let mut labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let statistic = stat_for(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null: Vec<f64> = (0..n_permutations)
        .map(|_| {
            labels.shuffle(&mut rng);
            stat_for(&labels)
        })
        .collect();
    null.sort_by(|x, y| x.total_cmp(y));
    let idx = ((level * n_permutations as f64).ceil() as usize).clamp(1, n_permutations.max(1)) - 1;
    let threshold = null.get(idx).copied().unwrap_or(f64::INFINITY);
    let exceed = null.iter().filter(|v| **v >= statistic).count();
    PermutationTest {
        statistic,
        threshold,
        p_value: (exceed + 1) as f64 / (n_permutations + 1) as f64,
        n_permutations,
    }
}

/// Median pairwise distance of the pooled sample (first 1000 rows of each).
pub fn median_heuristic(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let a = a.slice(ndarray::s![..a.nrows().min(1000), ..]);
    let b = b.slice(ndarray::s![..b.nrows().min(1000), ..]);
    let pooled = ndarray::concatenate(Axis(0), &[a, b]).expect("same dimension");
    let mut d = vec![];
    for i in 0..pooled.nrows() {
        for j in i + 1..pooled.nrows() {
            d.push(dist(pooled.row(i), pooled.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, |x, y| x.total_cmp(y)).1
}

/// Unbiased squared MMD with a Gaussian kernel of bandwidth `h`, or the
/// median heuristic when `h` is `None`.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, h: Option<f64>) -> f64 {
    let h = h.unwrap_or_else(|| median_heuristic(a, b)).max(1e-12);
    let k = |x: ArrayView1<f64>, y: ArrayView1<f64>| (-dist(x, y).powi(2) / (2.0 * h * h)).exp();
    let self_term = |x: ArrayView2<f64>| {
        let n = x.nrows();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            cross += k(x, y);
        }
    }
    self_term(a) + self_term(b) - 2.0 * cross / (a.nrows() * b.nrows()) as f64
}

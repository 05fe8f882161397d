//! Toy 2-D datasets.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfprior::oracle::GaussianMixture;
use rfprior::train::DataSampler;
use serde::{Deserialize, Serialize};

pub const RING_RADIUS: f64 = 4.0;
pub const RING_STD: f64 = 0.2;
pub const RING_MODES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    /// Eight modes on a circle of radius 4, std 0.2, labelled by mode.
    GaussianRing8,
    /// Two interleaved half circles with noise 0.1, labelled by moon.
    TwoMoons,
    /// Alternating unit squares on `[−4, 4]²`, unlabelled.
    Checkerboard,
    /// `N(0, I)` in two dimensions, unlabelled.
    SingleGaussian,
    /// Any diagonal mixture, labelled by component.
    Mixture { mixture: GaussianMixture },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::GaussianRing8 => "gaussian_ring8",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::SingleGaussian => "single_gaussian",
            DatasetKind::Mixture { .. } => "mixture",
        }
    }
}

/// Centers of the ring modes, mode `k` at angle `k·π/4`.
pub fn ring_centers() -> Vec<Vec<f64>> {
    (0..RING_MODES)
        .map(|k| {
            let a = k as f64 * 2.0 * std::f64::consts::PI / RING_MODES as f64;
            vec![RING_RADIUS * a.cos(), RING_RADIUS * a.sin()]
        })
        .collect()
}

/// The ring as an exact mixture, for oracle fields.
pub fn ring_mixture() -> GaussianMixture {
    GaussianMixture::isotropic(ring_centers(), RING_STD).expect("valid ring")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(flatten)]
    pub kind: DatasetKind,
}

impl Dataset {
    pub fn new(kind: DatasetKind) -> Self {
        Self { kind }
    }

    /// `n` seeded i.i.d. draws with labels.
    pub fn sample(&self, n: usize, seed: u64) -> (Array2<f64>, Vec<Option<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_batch(&mut rng, n)
    }

    fn draw(&self, rng: &mut dyn RngCore) -> (Vec<f64>, Option<usize>) {
        let g = |rng: &mut dyn RngCore| rng.sample::<f64, _>(StandardNormal);
        match &self.kind {
            DatasetKind::GaussianRing8 => {
                let k = rng.random_range(0..RING_MODES);
                let c = &ring_centers()[k];
                (vec![c[0] + RING_STD * g(rng), c[1] + RING_STD * g(rng)], Some(k))
            }
            DatasetKind::TwoMoons => {
                let k = rng.random_range(0..2);
                let a = std::f64::consts::PI * rng.random::<f64>();
                let (x, y) = if k == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
                // centred and scaled to a span comparable with the ring
                (vec![2.0 * (x - 0.5) + 0.1 * g(rng), 2.0 * (y - 0.25) + 0.1 * g(rng)], Some(k))
            }
            DatasetKind::Checkerboard => loop {
                let x = 8.0 * rng.random::<f64>() - 4.0;
                let y = 8.0 * rng.random::<f64>() - 4.0;
                if (x.floor() as i64 + y.floor() as i64).rem_euclid(2) == 0 {
                    break (vec![x, y], None);
                }
            },
            DatasetKind::SingleGaussian => (vec![g(rng), g(rng)], None),
            DatasetKind::Mixture { mixture } => {
                let (x, k) = mixture.sample(rng);
                (x, Some(k))
            }
        }
    }
}

impl DataSampler for Dataset {
    fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Mixture { mixture } => mixture.dim(),
            _ => 2,
        }
    }

    fn num_labels(&self) -> usize {
        match &self.kind {
            DatasetKind::GaussianRing8 => RING_MODES,
            DatasetKind::TwoMoons => 2,
            DatasetKind::Checkerboard | DatasetKind::SingleGaussian => 0,
            DatasetKind::Mixture { mixture } => mixture.len(),
        }
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> (Array2<f64>, Vec<Option<usize>>) {
        let mut x = Array2::zeros((n, self.dim()));
        let mut labels = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let (p, l) = self.draw(rng);
            row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
            labels.push(l);
        }
        (x, labels)
    }
}

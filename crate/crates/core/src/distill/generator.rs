//! Differentiable maps `x = g(θ, view)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Per-call view descriptor. Only [`RotationView`] reads it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct View {
    pub angle: f64,
}

pub trait Generator: Sync {
    fn param_dim(&self) -> usize;
    fn out_dim(&self) -> usize;

    /// Draws the view for one optimization step. Generators without views
    /// return the default and leave `rng` untouched.
    fn draw_view(&self, _rng: &mut dyn RngCore) -> View {
        View::default()
    }

    fn render(&self, theta: &[f64], view: &View) -> Result<Vec<f64>>;

    /// `upstreamᵀ·∂g/∂θ`.
    fn vjp(&self, theta: &[f64], view: &View, upstream: &[f64]) -> Result<Vec<f64>>;
}

/// `x = θ`.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub dim: usize,
}

impl Generator for Identity {
    fn param_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn render(&self, theta: &[f64], _view: &View) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        Ok(theta.to_vec())
    }

    fn vjp(&self, theta: &[f64], _view: &View, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        check_dim(self.dim, upstream.len())?;
        Ok(upstream.to_vec())
    }
}

/// `x = A·θ + b` with `A`, `b` drawn once from a seed.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Row-major `out × in`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub param_dim: usize,
}

impl Linear {
    pub fn seeded(param_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (param_dim as f64).sqrt();
        let a = (0..out_dim * param_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = (0..out_dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { a, b, param_dim }
    }
}

impl Generator for Linear {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn out_dim(&self) -> usize {
        self.b.len()
    }

    fn render(&self, theta: &[f64], _view: &View) -> Result<Vec<f64>> {
        check_dim(self.param_dim, theta.len())?;
        Ok(self
            .a
            .chunks(self.param_dim)
            .zip(&self.b)
            .map(|(row, b)| b + row.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>())
            .collect())
    }

    fn vjp(&self, theta: &[f64], _view: &View, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.param_dim, theta.len())?;
        check_dim(self.b.len(), upstream.len())?;
        let mut g = vec![0.0; self.param_dim];
        for (row, u) in self.a.chunks(self.param_dim).zip(upstream) {
            g.iter_mut().zip(row).for_each(|(gi, a)| *gi += u * a);
        }
        Ok(g)
    }
}

/// `x = R(φ)·θ`, rotating the first two coordinates by a per-call angle
/// drawn uniformly from `[−max_angle, max_angle]`.
#[derive(Debug, Clone, Copy)]
pub struct RotationView {
    pub dim: usize,
    pub max_angle: f64,
}

impl RotationView {
    pub fn new(dim: usize, max_angle: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("rotation view needs dimension >= 2".into()));
        }
        Ok(Self { dim, max_angle })
    }
}

impl Generator for RotationView {
    fn param_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn draw_view(&self, rng: &mut dyn RngCore) -> View {
        View { angle: self.max_angle * (2.0 * rng.random::<f64>() - 1.0) }
    }

    fn render(&self, theta: &[f64], view: &View) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        let (s, c) = view.angle.sin_cos();
        let mut x = theta.to_vec();
        x[0] = c * theta[0] - s * theta[1];
        x[1] = s * theta[0] + c * theta[1];
        Ok(x)
    }

    fn vjp(&self, theta: &[f64], view: &View, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        check_dim(self.dim, upstream.len())?;
        let (s, c) = view.angle.sin_cos();
        let mut g = upstream.to_vec();
        g[0] = c * upstream[0] + s * upstream[1];
        g[1] = -s * upstream[0] + c * upstream[1];
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_vjp(g: &dyn Generator, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..g.param_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let up: Vec<f64> = (0..g.out_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let view = g.draw_view(&mut rng);
            let an = g.vjp(&theta, &view, &up).unwrap();
            let h = 1e-6;
            for i in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fp = g.render(&tp, &view).unwrap();
                let fm = g.render(&tm, &view).unwrap();
                let fd: f64 = (0..up.len()).map(|j| up[j] * (fp[j] - fm[j]) / (2.0 * h)).sum();
                let rel = (fd - an[i]).abs() / an[i].abs().max(1e-3);
                assert!(rel <= 1e-6, "fd {fd} analytic {}", an[i]);
            }
        }
    }

    #[test]
    fn vjps_match_finite_differences() {
        check_vjp(&Identity { dim: 3 }, 1);
        check_vjp(&Linear::seeded(4, 2, 7), 2);
        check_vjp(&RotationView::new(3, 1.0).unwrap(), 3);
    }

    #[test]
    fn rotation_preserves_norm_and_seeds_repeat() {
        let g = RotationView::new(2, std::f64::consts::PI).unwrap();
        let x = g.render(&[3.0, 4.0], &View { angle: 0.7 }).unwrap();
        assert!((x[0].hypot(x[1]) - 5.0).abs() < 1e-12);
        assert_eq!(Linear::seeded(3, 2, 5).a, Linear::seeded(3, 2, 5).a);
        assert!(RotationView::new(1, 1.0).is_err());
    }
}

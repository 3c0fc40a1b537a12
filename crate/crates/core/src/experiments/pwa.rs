//! Piecewise-affine functions of one variable with a parametrized kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Scale, Trained};
use crate::arch::Architecture;
use crate::data::Dataset;
use crate::error::{PcfError, Result};
use crate::loss::{LossSpec, RegSpec};
use crate::selection::rmse;
use crate::training::{fit, TrainConfig};

/// `s+ max(0, x - m) + s- max(0, m - x) + v` with `theta = (s+, s-, m, v)`.
pub fn pwa_true(x: f64, theta: &[f64]) -> f64 {
    let (sp, sm, m, v) = (theta[0], theta[1], theta[2], theta[3]);
    sp * (x - m).max(0.0) + sm * (m - x).max(0.0) + v
}

pub fn is_convex(theta: &[f64]) -> bool {
    theta[0] >= -theta[1]
}

/// Ordinary least-squares line through `(x, y)`, as `(slope, intercept)`.
pub fn best_affine_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[derive(Debug, Clone)]
pub struct PwaData {
    pub data: Dataset,
    /// Per sample: whether its `theta` gives a convex function.
    pub convex: Vec<bool>,
    /// Per sample: the best affine fit of its slice for nonconvex `theta`,
    /// the true value otherwise.
    pub affine: Vec<f64>,
}

/// `n_x` equally spaced points on `[-1, 1]`.
pub fn grid(n_x: usize) -> Vec<f64> {
    if n_x == 1 {
        return vec![0.0];
    }
    (0..n_x)
        .map(|i| -1.0 + 2.0 * i as f64 / (n_x - 1) as f64)
        .collect()
}

pub fn gen_pwa(n_theta: usize, n_x: usize, seed: u64) -> Result<PwaData> {
    if n_theta == 0 || n_x == 0 {
        return Err(PcfError::InvalidInput(
            "pwa needs at least one theta and one x".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = grid(n_x);
    let mut x = Vec::with_capacity(n_theta * n_x);
    let mut th = Vec::with_capacity(n_theta * n_x * 4);
    let mut y = Vec::with_capacity(n_theta * n_x);
    let mut convex = Vec::with_capacity(n_theta * n_x);
    let mut affine = Vec::with_capacity(n_theta * n_x);
    for _ in 0..n_theta {
        let theta: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let ys: Vec<f64> = xs.iter().map(|&a| pwa_true(a, &theta)).collect();
        let cvx = is_convex(&theta);
        let (slope, icpt) = best_affine_fit(&xs, &ys);
        for (a, b) in xs.iter().zip(&ys) {
            x.push(*a);
            th.extend_from_slice(&theta);
            y.push(*b);
            convex.push(cvx);
            affine.push(if cvx { *b } else { slope * a + icpt });
        }
    }
    Ok(PwaData {
        data: Dataset::new(1, 4, 1, x, th, y)?,
        convex,
        affine,
    })
}

#[derive(Debug, Clone)]
pub struct PwaConfig {
    pub n_theta: usize,
    pub n_x: usize,
    pub n_test_theta: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl PwaConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        let (n_theta, n_test_theta, train) = match scale {
            Scale::Smoke => (20, 10, scale.smoke_train(seed)),
            Scale::Desk => (400, 200, scale.desk_train(seed)),
            Scale::Paper => (
                2000,
                2000,
                TrainConfig {
                    seed,
                    ..Default::default()
                },
            ),
        };
        PwaConfig {
            n_theta,
            n_x: 50,
            n_test_theta,
            seed,
            train,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PwaMetrics {
    pub rmse_all: f64,
    pub rmse_convex: f64,
    pub rmse_nonconvex: f64,
    pub rmse_nonconvex_vs_affine: f64,
    pub test_samples: usize,
    pub convex_fraction: f64,
}

fn masked_rmse(pred: &[f64], target: &[f64], mask: impl Fn(usize) -> bool) -> Result<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) = (0..pred.len())
        .filter(|&k| mask(k))
        .map(|k| (pred[k], target[k]))
        .unzip();
    if p.is_empty() {
        return Ok(f64::NAN);
    }
    rmse(&p, &t)
}

pub fn run(cfg: &PwaConfig) -> Result<Trained<PwaMetrics>> {
    let train = gen_pwa(cfg.n_theta, cfg.n_x, cfg.seed)?;
    let test = gen_pwa(cfg.n_test_theta, cfg.n_x, cfg.seed.wrapping_add(1))?;
    let arch = Architecture::new(1, 4, 1)?;
    let (model, report) = fit(
        &arch,
        &train.data,
        &LossSpec::Quadratic,
        &RegSpec::none(),
        &cfg.train,
    )?;
    let pred = model.predict(&test.data)?;
    let y = test.data.y_flat();
    let metrics = PwaMetrics {
        rmse_all: rmse(&pred, y)?,
        rmse_convex: masked_rmse(&pred, y, |k| test.convex[k])?,
        rmse_nonconvex: masked_rmse(&pred, y, |k| !test.convex[k])?,
        rmse_nonconvex_vs_affine: masked_rmse(&pred, &test.affine, |k| !test.convex[k])?,
        test_samples: test.data.len(),
        convex_fraction: test.convex.iter().filter(|c| **c).count() as f64
            / test.convex.len() as f64,
    };
    Ok(Trained {
        metrics,
        model,
        report,
        test: test.data,
        pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(pwa_true(0.5, &[1.0, 1.0, 0.0, 0.0]), 0.5);
        assert_eq!(pwa_true(0.0, &[1.0, 1.0, 0.0, 0.0]), 0.0);
        assert!(!is_convex(&[1.0, -2.0, 0.0, 0.0]));
        assert!(is_convex(&[1.0, -1.0, 0.0, 0.0]));
    }

    #[test]
    fn affine_fit_recovers_a_line() {
        let x = grid(7);
        let y: Vec<f64> = x.iter().map(|a| 2.0 * a - 0.5).collect();
        let (s, c) = best_affine_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-14 && (c + 0.5).abs() < 1e-14);
    }

    #[test]
    fn generator_layout() {
        let g = gen_pwa(3, 50, 9).unwrap();
        assert_eq!(g.data.len(), 150);
        let xs = grid(50);
        assert_eq!(xs[0], -1.0);
        assert_eq!(xs[49], 1.0);
        for k in 0..150 {
            assert_eq!(g.data.x(k)[0], xs[k % 50]);
            assert_eq!(g.data.y(k)[0], pwa_true(g.data.x(k)[0], g.data.theta(k)));
            assert!(g.data.theta(k).iter().all(|t| t.abs() <= 1.0));
            if g.convex[k] {
                assert_eq!(g.affine[k], g.data.y(k)[0]);
            }
        }
        assert_eq!(gen_pwa(3, 50, 9).unwrap().data, g.data);
    }
}

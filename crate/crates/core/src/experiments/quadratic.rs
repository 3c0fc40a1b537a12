//! `f(x, theta) = x^T theta x` for positive semidefinite `theta`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{Scale, Trained};
use crate::arch::{Activation, Architecture};
use crate::data::Dataset;
use crate::error::{PcfError, Result};
use crate::loss::{LossSpec, RegSpec};
use crate::selection::{r2_score, rmse};
use crate::training::{fit, TrainConfig};

/// Number of entries in the upper triangle of an `n x n` matrix.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Symmetric matrix from its row-major upper triangle.
pub fn unpack(n: usize, packed: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[i * n + j] = packed[k];
            m[j * n + i] = packed[k];
            k += 1;
        }
    }
    m
}

pub fn quadratic_true(x: &[f64], packed: &[f64]) -> f64 {
    let n = x.len();
    let m = unpack(n, packed);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * m[i * n + j] * x[j];
        }
    }
    s
}

/// `S^T S / sqrt(n)` with `S` uniform on `[-1, 1]`, symmetrized and packed.
pub fn random_psd(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let scale = (n as f64).sqrt();
    let mut full = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            full[i * n + j] = (0..n).map(|k| s[k * n + i] * s[k * n + j]).sum::<f64>() / scale;
        }
    }
    let mut packed = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in i..n {
            packed.push(0.5 * (full[i * n + j] + full[j * n + i]));
        }
    }
    packed
}

/// Uniform sample from the closed unit ball.
pub fn unit_ball(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let r = rng.gen::<f64>().powf(1.0 / n as f64);
            return g.into_iter().map(|v| v * r / norm).collect();
        }
    }
}

pub fn gen_quadratic(n_theta: usize, n_x: usize, n_dim: usize, seed: u64) -> Result<Dataset> {
    if n_theta == 0 || n_x == 0 || n_dim == 0 {
        return Err(PcfError::InvalidInput(
            "quadratic needs positive counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = packed_len(n_dim);
    let rows = n_theta * n_x;
    let (mut x, mut th, mut y) = (
        Vec::with_capacity(rows * n_dim),
        Vec::with_capacity(rows * p),
        Vec::with_capacity(rows),
    );
    for _ in 0..n_theta {
        let theta = random_psd(n_dim, &mut rng);
        for _ in 0..n_x {
            let xi = unit_ball(n_dim, &mut rng);
            y.push(quadratic_true(&xi, &theta));
            x.extend_from_slice(&xi);
            th.extend_from_slice(&theta);
        }
    }
    Dataset::new(n_dim, p, 1, x, th, y)
}

#[derive(Debug, Clone)]
pub struct QuadraticConfig {
    pub n_theta: usize,
    pub n_x: usize,
    pub n_dim: usize,
    pub n_test_theta: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl QuadraticConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        let (n_theta, n_x, n_test_theta, train) = match scale {
            Scale::Smoke => (10, 20, 5, scale.smoke_train(seed)),
            Scale::Desk => (300, 100, 100, scale.desk_train(seed)),
            Scale::Paper => (
                1000,
                100,
                1000,
                TrainConfig {
                    seed,
                    ..Default::default()
                },
            ),
        };
        QuadraticConfig {
            n_theta,
            n_x,
            n_dim: 3,
            n_test_theta,
            seed,
            train,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticMetrics {
    pub rmse: f64,
    pub r2: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub test_samples: usize,
}

pub fn run(cfg: &QuadraticConfig) -> Result<Trained<QuadraticMetrics>> {
    let train = gen_quadratic(cfg.n_theta, cfg.n_x, cfg.n_dim, cfg.seed)?;
    let test = gen_quadratic(
        cfg.n_test_theta,
        cfg.n_x,
        cfg.n_dim,
        cfg.seed.wrapping_add(1),
    )?;
    let arch = Architecture::builder(cfg.n_dim, packed_len(cfg.n_dim), 1)
        .activation(Activation::Softplus)
        .build()?;
    let (model, report) = fit(
        &arch,
        &train,
        &LossSpec::Quadratic,
        &RegSpec::none(),
        &cfg.train,
    )?;
    let pred = model.predict(&test)?;
    let y = test.y_flat();
    let metrics = QuadraticMetrics {
        rmse: rmse(&pred, y)?,
        r2: r2_score(&pred, y, 1)?,
        y_min: y.iter().copied().fold(f64::INFINITY, f64::min),
        y_max: y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        test_samples: test.len(),
    };
    Ok(Trained {
        metrics,
        model,
        report,
        test,
        pred,
    })
}

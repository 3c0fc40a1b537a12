//! Membership in parametrized ellipses, learned as the sublevel set
//! `{x : f(x, theta) <= 0}` of a PCF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Scale, Trained};
use crate::arch::{Activation, Architecture, Quadratic};
use crate::data::Dataset;
use crate::error::{PcfError, Result};
use crate::loss::{error_rate_of, LossSpec, RegSpec};
use crate::training::{fit, TrainConfig};

/// Half-width of the square `x` is drawn from.
pub const BOX: f64 = 1.2;

/// Center and semi-axes of the ellipse for `theta` in `[-1, 1]^3`.
pub fn ellipse(theta: &[f64]) -> ([f64; 2], [f64; 2]) {
    (
        [0.5 * theta[0], 0.5 * theta[1]],
        [0.6 + 0.3 * theta[2], 0.6 - 0.3 * theta[2]],
    )
}

/// `-1` inside the ellipse (where a convex `f` should be nonpositive), `+1`
/// outside.
pub fn label(x: &[f64], theta: &[f64]) -> f64 {
    let (c, r) = ellipse(theta);
    let s = ((x[0] - c[0]) / r[0]).powi(2) + ((x[1] - c[1]) / r[1]).powi(2);
    if s <= 1.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn gen_ellipses(n_theta: usize, n_x: usize, seed: u64) -> Result<Dataset> {
    if n_theta == 0 || n_x == 0 {
        return Err(PcfError::InvalidInput(
            "ellipses need positive counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = n_theta * n_x;
    let (mut x, mut th, mut y) = (
        Vec::with_capacity(2 * rows),
        Vec::with_capacity(3 * rows),
        Vec::with_capacity(rows),
    );
    for _ in 0..n_theta {
        let theta: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        for _ in 0..n_x {
            let xi = [rng.gen_range(-BOX..=BOX), rng.gen_range(-BOX..=BOX)];
            y.push(label(&xi, &theta));
            x.extend_from_slice(&xi);
            th.extend_from_slice(&theta);
        }
    }
    Dataset::new(2, 3, 1, x, th, y)
}

#[derive(Debug, Clone)]
pub struct ClassificationConfig {
    pub n_theta: usize,
    pub n_x: usize,
    pub n_test_theta: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ClassificationConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        let (n_theta, n_test_theta, train) = match scale {
            Scale::Smoke => (20, 10, scale.smoke_train(seed)),
            Scale::Desk => (200, 100, scale.desk_train(seed)),
            Scale::Paper => (
                1000,
                1000,
                TrainConfig {
                    seed,
                    ..Default::default()
                },
            ),
        };
        ClassificationConfig {
            n_theta,
            n_x: 50,
            n_test_theta,
            seed,
            train,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationMetrics {
    pub error_rate: f64,
    pub train_error_rate: f64,
    pub inside_fraction: f64,
    pub test_samples: usize,
}

pub fn run(cfg: &ClassificationConfig) -> Result<Trained<ClassificationMetrics>> {
    let train = gen_ellipses(cfg.n_theta, cfg.n_x, cfg.seed)?;
    let test = gen_ellipses(cfg.n_test_theta, cfg.n_x, cfg.seed.wrapping_add(1))?;
    let arch = Architecture::builder(2, 3, 1)
        .activation(Activation::Softplus)
        .quadratic(Quadratic::Full)
        .build()?;
    let (model, report) = fit(
        &arch,
        &train,
        &LossSpec::Logistic,
        &RegSpec::none(),
        &cfg.train,
    )?;
    let pred = model.predict(&test)?;
    let y = test.y_flat();
    let metrics = ClassificationMetrics {
        error_rate: error_rate_of(&pred, y)?,
        train_error_rate: error_rate_of(&model.predict(&train)?, train.y_flat())?,
        inside_fraction: y.iter().filter(|v| **v < 0.0).count() as f64 / y.len() as f64,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        let th = [0.0, 0.0, 0.0];
        assert_eq!(label(&[0.0, 0.0], &th), -1.0);
        assert_eq!(label(&[0.6, 0.0], &th), -1.0);
        assert_eq!(label(&[0.61, 0.0], &th), 1.0);
        // center (0.5, -0.5), axes (0.9, 0.3)
        let th = [1.0, -1.0, 1.0];
        assert_eq!(label(&[1.35, -0.5], &th), -1.0);
        assert_eq!(label(&[0.5, -0.85], &th), 1.0);
    }

    #[test]
    fn both_classes_present() {
        let data = gen_ellipses(20, 50, 0).unwrap();
        let inside = data.y_flat().iter().filter(|v| **v < 0.0).count();
        assert!(inside > 50 && inside < 500, "{inside}");
    }
}

//! Battery aging rate as a function of charge and charge rate, parametrized
//! by charge throughput, capacity and temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Scale, Trained};
use crate::arch::{Activation, Architecture};
use crate::data::Dataset;
use crate::error::{PcfError, Result};
use crate::loss::{LossSpec, RegSpec};
use crate::selection::rmse;
use crate::training::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryConstants {
    pub e_a: f64,
    pub r_g: f64,
    pub t0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub z: f64,
    pub eta: f64,
}

impl Default for BatteryConstants {
    fn default() -> Self {
        BatteryConstants {
            e_a: 31500.0,
            r_g: 8.3145,
            t0: 273.15,
            alpha: 28.966,
            beta: 74.112,
            z: 0.6,
            eta: 152.5,
        }
    }
}

impl BatteryConstants {
    /// Aging rate at `x = (q, b)` and `theta = (A, Q, T)`.
    pub fn f_true(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (q, b) = (x[0], x[1]);
        let (a, cap, t) = (theta[0], theta[1], theta[2]);
        self.z
            * a.powf(self.z - 1.0)
            * b
            * (self.alpha * q / cap + self.beta)
            * ((-self.e_a + self.eta * b / cap) / (self.r_g * (self.t0 + t))).exp()
    }

    /// `(mu, nu)` of the linearization around `(q, b) = (Q/2, 0)`.
    pub fn short_coefficients(&self, theta: &[f64]) -> (f64, f64) {
        let (a, cap, t) = (theta[0], theta[1], theta[2]);
        let mu = self.beta
            * (-self.e_a / (self.r_g * (self.t0 + t))).exp()
            * self.z
            * a.powf(self.z - 1.0);
        (mu, self.alpha / (self.beta * cap))
    }

    /// `mu (1 + nu Q / 2) b`.
    pub fn f_short(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (mu, nu) = self.short_coefficients(theta);
        mu * (1.0 + nu * theta[1] / 2.0) * x[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryRanges {
    pub q: (f64, f64),
    pub b: (f64, f64),
    pub a: (f64, f64),
    pub t: (f64, f64),
    pub capacity: f64,
}

impl Default for BatteryRanges {
    fn default() -> Self {
        BatteryRanges {
            q: (0.2, 0.8),
            b: (0.0, 30.0),
            a: (1.0, 50.0),
            t: (10.0, 50.0),
            capacity: 1.0,
        }
    }
}

pub fn gen_battery(
    n_theta: usize,
    n_x: usize,
    consts: &BatteryConstants,
    ranges: &BatteryRanges,
    seed: u64,
) -> Result<Dataset> {
    if n_theta == 0 || n_x == 0 {
        return Err(PcfError::InvalidInput(
            "battery needs positive counts".into(),
        ));
    }
    if ranges.a.0 <= 0.0 {
        return Err(PcfError::InvalidInput(
            "charge throughput must stay positive".into(),
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
        let theta = [
            rng.gen_range(ranges.a.0..=ranges.a.1),
            ranges.capacity,
            rng.gen_range(ranges.t.0..=ranges.t.1),
        ];
        for _ in 0..n_x {
            let xi = [
                rng.gen_range(ranges.q.0..=ranges.q.1),
                rng.gen_range(ranges.b.0..=ranges.b.1),
            ];
            y.push(consts.f_true(&xi, &theta));
            x.extend_from_slice(&xi);
            th.extend_from_slice(&theta);
        }
    }
    Dataset::new(2, 3, 1, x, th, y)
}

#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub n_theta: usize,
    pub n_x: usize,
    pub n_test_theta: usize,
    pub seed: u64,
    pub constants: BatteryConstants,
    pub ranges: BatteryRanges,
    pub train: TrainConfig,
}

impl BatteryConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        let paper_iters = TrainConfig {
            adam_iters: 1000,
            lbfgs_iters: 4000,
            ..scale.desk_train(seed)
        };
        let (n_theta, n_test_theta, train) = match scale {
            Scale::Smoke => (10, 5, scale.smoke_train(seed)),
            Scale::Desk => (300, 100, paper_iters),
            Scale::Paper => (
                1000,
                1000,
                TrainConfig {
                    n_starts: None,
                    ..paper_iters
                },
            ),
        };
        BatteryConfig {
            n_theta,
            n_x: 100,
            n_test_theta,
            seed,
            constants: BatteryConstants::default(),
            ranges: BatteryRanges::default(),
            train,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryMetrics {
    pub rmse: f64,
    pub rmse_short: f64,
    /// `rmse_short / rmse`.
    pub improvement: f64,
    pub y_max: f64,
    pub test_samples: usize,
}

pub fn run(cfg: &BatteryConfig) -> Result<Trained<BatteryMetrics>> {
    let train = gen_battery(cfg.n_theta, cfg.n_x, &cfg.constants, &cfg.ranges, cfg.seed)?;
    let test = gen_battery(
        cfg.n_test_theta,
        cfg.n_x,
        &cfg.constants,
        &cfg.ranges,
        cfg.seed.wrapping_add(1),
    )?;
    let arch = Architecture::builder(2, 3, 1)
        .widths(vec![5, 5])
        .psi_hidden(vec![10])
        .activation(Activation::Softplus)
        .scaling(true)
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
    let short: Vec<f64> = (0..test.len())
        .map(|k| cfg.constants.f_short(test.x(k), test.theta(k)))
        .collect();
    let (r, rs) = (rmse(&pred, y)?, rmse(&short, y)?);
    let metrics = BatteryMetrics {
        rmse: r,
        rmse_short: rs,
        improvement: rs / r,
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

//! Convex value-function fit for pendulum swing-up, and the resulting
//! one-step lookahead controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::pendulum::{
    adp_step, rollout, simulate, solve_ocp, ClosedLoop, OcpResult, Pendulum, UPRIGHT, U_MAX,
};
use super::{Scale, Trained};
use crate::arch::{Activation, Architecture, Quadratic};
use crate::data::Dataset;
use crate::error::{PcfError, Result};
use crate::loss::{ArgminTarget, LossSpec, RegKind, RegSpec};
use crate::selection::{r2_score, rmse};
use crate::training::{fit, TrainConfig};

#[derive(Debug, Clone)]
pub struct AdpConfig {
    /// Number of sampled initial states (one optimal control problem each).
    pub n_samples: usize,
    pub horizon: usize,
    pub sim_steps: usize,
    /// Held-out initial states for comparing first inputs.
    pub n_compare: usize,
    pub lambda: f64,
    pub rho_min: f64,
    pub seed: u64,
    pub system: Pendulum,
    pub train: TrainConfig,
}

impl AdpConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        let base = AdpConfig {
            n_samples: 300,
            horizon: 60,
            sim_steps: 300,
            n_compare: 50,
            lambda: 1e-5,
            rho_min: 1.0,
            seed,
            system: Pendulum::default(),
            train: TrainConfig {
                adam_iters: 1000,
                max_evals: Some(2000),
                ..scale.desk_train(seed)
            },
        };
        match scale {
            Scale::Smoke => AdpConfig {
                n_samples: 12,
                horizon: 20,
                sim_steps: 50,
                n_compare: 4,
                train: scale.smoke_train(seed),
                ..base
            },
            Scale::Desk => base,
            Scale::Paper => AdpConfig {
                n_samples: 1000,
                horizon: 150,
                n_compare: 200,
                train: TrainConfig {
                    n_starts: Some(16),
                    max_evals: Some(5000),
                    ..base.train.clone()
                },
                ..base
            },
        }
    }
}

/// Uniform initial state and mass: angle in `[-pi/6, 7pi/6]`, rate in
/// `[-1, 1]`, mass in `[0.5, 2]`.
pub fn sample_instance(rng: &mut impl Rng) -> ([f64; 2], f64) {
    use std::f64::consts::PI;
    let z = [
        rng.gen_range(-PI / 6.0..=7.0 * PI / 6.0),
        rng.gen_range(-1.0..=1.0),
    ];
    (z, rng.gen_range(0.5..=2.0))
}

fn solve_all(cfg: &AdpConfig, instances: &[([f64; 2], f64)]) -> Result<Vec<Option<OcpResult>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.n_workers.max(1))
        .build()
        .map_err(|e| PcfError::InvalidInput(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        instances
            .par_iter()
            .map(
                |(z, m)| match solve_ocp(&cfg.system, *z, *m, cfg.horizon, None) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("adp: dropping sample z0={z:?} m={m}: {e}");
                        None
                    }
                },
            )
            .collect()
    }))
}

/// Tail-cost samples `(state, mass, value)` from every solved trajectory.
pub fn value_dataset(
    instances: &[([f64; 2], f64)],
    solved: &[Option<OcpResult>],
) -> Result<Dataset> {
    let (mut x, mut th, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for ((_, m), r) in instances.iter().zip(solved) {
        let Some(r) = r else { continue };
        for (z, tail) in r.states.iter().zip(&r.tail_costs) {
            x.extend_from_slice(z);
            th.push(*m);
            y.push(*tail);
        }
    }
    Dataset::new(2, 1, 1, x, th, y)
}

pub fn value_architecture() -> Result<Architecture> {
    Architecture::builder(2, 1, 1)
        .widths(vec![20, 20])
        .psi_hidden(vec![10, 10])
        .activation(Activation::Softplus)
        .quadratic(Quadratic::Full)
        .scaling(true)
        .build()
}

pub fn value_regularizer(lambda: f64, rho_min: f64) -> RegSpec {
    RegSpec {
        lambda,
        kind: RegKind::ElasticNet {
            alpha_l2: 1e-8,
            alpha_l1: 0.1,
        },
        rho_min,
        argmin: Some(ArgminTarget::constant(UPRIGHT.to_vec())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdpMetrics {
    pub ocp_samples: usize,
    pub ocp_flagged: usize,
    pub ocp_unconverged: usize,
    pub value_samples: usize,
    pub value_rmse: f64,
    pub value_r2: f64,
    /// Mean of `|grad_x f(upright, m)|` over the training masses.
    pub upright_grad_norm: f64,
    pub first_input_rmse: f64,
    pub first_input_corr: f64,
    pub reached_at: Option<usize>,
    pub final_state: [f64; 2],
    pub closed_loop_cost: f64,
    pub open_loop_cost: f64,
    /// `closed_loop_cost / open_loop_cost`, both over `sim_steps` steps.
    pub cost_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct AdpOutcome {
    pub trained: Trained<AdpMetrics>,
    pub closed_loop: ClosedLoop,
    /// Open-loop optimum from the same start over the same number of steps.
    pub reference: OcpResult,
    /// `(optimal, lookahead)` first inputs on held-out initial states.
    pub first_inputs: Vec<(f64, f64)>,
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn run(cfg: &AdpConfig) -> Result<AdpOutcome> {
    if cfg.n_samples == 0 || cfg.horizon == 0 {
        return Err(PcfError::InvalidInput(
            "adp needs samples and a positive horizon".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let instances: Vec<_> = (0..cfg.n_samples)
        .map(|_| sample_instance(&mut rng))
        .collect();
    let solved = solve_all(cfg, &instances)?;
    let flagged = solved.iter().filter(|r| r.is_none()).count();
    let unconverged = solved.iter().flatten().filter(|r| !r.converged).count();
    log::info!(
        "adp: {} trajectories, {flagged} dropped, {unconverged} at the iteration cap",
        solved.len()
    );
    let data = value_dataset(&instances, &solved)?;

    let arch = value_architecture()?;
    let reg = value_regularizer(cfg.lambda, cfg.rho_min);
    let (model, report) = fit(&arch, &data, &LossSpec::Quadratic, &reg, &cfg.train)?;
    let pred = model.predict(&data)?;

    let mut grad_sum = 0.0;
    let masses: Vec<f64> = instances
        .iter()
        .zip(&solved)
        .filter(|(_, r)| r.is_some())
        .map(|((_, m), _)| *m)
        .collect();
    for m in &masses {
        let g = model.grad_x(&UPRIGHT, &[*m])?;
        grad_sum += (g[0] * g[0] + g[1] * g[1]).sqrt();
    }

    let compare: Vec<_> = (0..cfg.n_compare)
        .map(|_| sample_instance(&mut rng))
        .collect();
    let compare_solved = solve_all(cfg, &compare)?;
    let mut first_inputs = Vec::with_capacity(compare.len());
    for ((z, m), r) in compare.iter().zip(&compare_solved) {
        if let Some(r) = r {
            first_inputs.push((r.inputs[0], adp_step(&model, &cfg.system, *z, *m, U_MAX)?));
        }
    }
    let (u_star, u_hat): (Vec<f64>, Vec<f64>) = first_inputs.iter().copied().unzip();

    let z0 = [0.0, 0.0];
    let closed_loop = simulate(&model, &cfg.system, z0, 1.0, cfg.sim_steps)?;
    // the better of a cold start and a start from the controller's own inputs
    let cold = solve_ocp(&cfg.system, z0, 1.0, cfg.sim_steps, None)?;
    let warm = solve_ocp(
        &cfg.system,
        z0,
        1.0,
        cfg.sim_steps,
        Some(&closed_loop.inputs),
    )?;
    let reference = if warm.cost < cold.cost { warm } else { cold };
    let (_, open_loop_cost) = rollout(&cfg.system, z0, 1.0, &reference.inputs);

    let y = data.y_flat();
    let metrics = AdpMetrics {
        ocp_samples: cfg.n_samples,
        ocp_flagged: flagged,
        ocp_unconverged: unconverged,
        value_samples: data.len(),
        value_rmse: rmse(&pred, y)?,
        value_r2: r2_score(&pred, y, 1)?,
        upright_grad_norm: grad_sum / masses.len().max(1) as f64,
        first_input_rmse: if u_star.is_empty() {
            f64::NAN
        } else {
            rmse(&u_hat, &u_star)?
        },
        first_input_corr: if u_star.len() < 2 {
            f64::NAN
        } else {
            correlation(&u_star, &u_hat)
        },
        reached_at: closed_loop.reached_at,
        final_state: *closed_loop.states.last().unwrap(),
        closed_loop_cost: closed_loop.cost,
        open_loop_cost,
        cost_ratio: closed_loop.cost / open_loop_cost,
    };
    Ok(AdpOutcome {
        trained: Trained {
            metrics,
            model,
            report,
            test: data,
            pred,
        },
        closed_loop,
        reference,
        first_inputs,
    })
}

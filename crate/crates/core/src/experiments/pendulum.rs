//! Damped pendulum with torque input: forward-Euler dynamics, finite-horizon
//! optimal control, and the one-step lookahead controller built on a convex
//! value function.

use serde::Serialize;

use crate::error::{PcfError, Result};
use crate::model::PcfModel;
use crate::optim::{Lbfgs, LbfgsStatus};

/// `m l^2 d'' + b d' + m g l sin d = u`, discretized with step `h`. The mass
/// `m` is the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pendulum {
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum {
            length: 1.0,
            damping: 0.05,
            gravity: 9.81,
            dt: 0.02,
        }
    }
}

impl Pendulum {
    /// Next state with zero input, `F(z, m)`.
    pub fn drift(&self, z: [f64; 2], m: f64) -> [f64; 2] {
        let (l, h) = (self.length, self.dt);
        let acc = (-self.damping * z[1] - m * self.gravity * l * z[0].sin()) / (m * l * l);
        [z[0] + h * z[1], z[1] + h * acc]
    }

    /// Input direction `G(m)`.
    pub fn input_gain(&self, m: f64) -> [f64; 2] {
        [0.0, self.dt / (m * self.length * self.length)]
    }

    pub fn step(&self, z: [f64; 2], m: f64, u: f64) -> [f64; 2] {
        let f = self.drift(z, m);
        let g = self.input_gain(m);
        [f[0] + g[0] * u, f[1] + g[1] * u]
    }

    /// Jacobian of [`Self::step`] with respect to the state, row-major.
    fn state_jacobian(&self, z: [f64; 2], m: f64) -> [[f64; 2]; 2] {
        let (l, h) = (self.length, self.dt);
        [
            [1.0, h],
            [
                -h * self.gravity * z[0].cos() / l,
                1.0 - h * self.damping / (m * l * l),
            ],
        ]
    }
}

/// Upright position the controller swings toward.
pub const UPRIGHT: [f64; 2] = [std::f64::consts::PI, 0.0];

/// `(d - pi)^2 + 0.01 d'^2 + 0.001 u^2`.
pub fn stage_cost(z: [f64; 2], u: f64) -> f64 {
    (z[0] - UPRIGHT[0]).powi(2) + 0.01 * z[1] * z[1] + 0.001 * u * u
}

fn stage_cost_grad(z: [f64; 2], u: f64) -> ([f64; 2], f64) {
    ([2.0 * (z[0] - UPRIGHT[0]), 0.02 * z[1]], 0.002 * u)
}

/// States `z_0..z_T` and the summed stage cost under `inputs`.
pub fn rollout(sys: &Pendulum, z0: [f64; 2], m: f64, inputs: &[f64]) -> (Vec<[f64; 2]>, f64) {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(z0);
    let mut cost = 0.0;
    let mut z = z0;
    for &u in inputs {
        cost += stage_cost(z, u);
        z = sys.step(z, m, u);
        states.push(z);
    }
    (states, cost)
}

/// Total cost of `inputs` and its gradient, by a backward (adjoint) sweep.
pub fn ocp_cost_and_grad(
    sys: &Pendulum,
    z0: [f64; 2],
    m: f64,
    inputs: &[f64],
    grad: &mut [f64],
) -> f64 {
    let (states, cost) = rollout(sys, z0, m, inputs);
    let gain = sys.input_gain(m);
    let mut adj = [0.0, 0.0];
    for t in (0..inputs.len()).rev() {
        let (hz, hu) = stage_cost_grad(states[t], inputs[t]);
        grad[t] = hu + gain[0] * adj[0] + gain[1] * adj[1];
        let j = sys.state_jacobian(states[t], m);
        adj = [
            hz[0] + j[0][0] * adj[0] + j[1][0] * adj[1],
            hz[1] + j[0][1] * adj[0] + j[1][1] * adj[1],
        ];
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcpResult {
    pub inputs: Vec<f64>,
    /// `z_0..z_T`.
    pub states: Vec<[f64; 2]>,
    /// `tail_costs[t] = sum_{s >= t} H(z_s, u_s)`, one per input.
    pub tail_costs: Vec<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Gradient norm reached `1e-4`.
    pub converged: bool,
    /// Solved from zero inputs after the first attempt diverged.
    pub retried: bool,
}

impl OcpResult {
    /// True when the tail costs never increase along the trajectory.
    pub fn tail_monotone(&self) -> bool {
        self.tail_costs.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn tail_costs(states: &[[f64; 2]], inputs: &[f64]) -> Vec<f64> {
    let mut tails = vec![0.0; inputs.len()];
    let mut acc = 0.0;
    for t in (0..inputs.len()).rev() {
        acc += stage_cost(states[t], inputs[t]);
        tails[t] = acc;
    }
    tails
}

const OCP_GRAD_TOL: f64 = 1e-4;

fn solve_from(
    sys: &Pendulum,
    z0: [f64; 2],
    m: f64,
    init: Vec<f64>,
) -> Option<(Vec<f64>, f64, usize)> {
    let horizon = init.len();
    let solver = Lbfgs {
        // max-abs tolerance that guarantees the Euclidean one
        grad_tol: OCP_GRAD_TOL / (horizon as f64).sqrt(),
        f_tol: 0.0,
        max_iters: 5000,
        ..Lbfgs::default()
    };
    let out = solver.minimize(|u, g| ocp_cost_and_grad(sys, z0, m, u, g), init);
    let finite = out.f.is_finite() && out.x.iter().all(|v| v.is_finite());
    (finite && out.status != LbfgsStatus::NonFinite).then_some((out.x, out.f, out.iterations))
}

/// Locally optimal open-loop inputs over `horizon` steps from `z0`, starting
/// from `init` (zeros when absent). A diverged solve is retried once from
/// zero inputs before giving up.
pub fn solve_ocp(
    sys: &Pendulum,
    z0: [f64; 2],
    m: f64,
    horizon: usize,
    init: Option<&[f64]>,
) -> Result<OcpResult> {
    if horizon == 0 {
        return Err(PcfError::InvalidInput("horizon must be >= 1".into()));
    }
    if !(m > 0.0) || !z0.iter().all(|v| v.is_finite()) {
        return Err(PcfError::InvalidInput(format!(
            "bad pendulum instance z0={z0:?} m={m}"
        )));
    }
    let zeros = vec![0.0; horizon];
    let first = match init {
        Some(u) => {
            crate::error::check_len("initial inputs", horizon, u.len())?;
            solve_from(sys, z0, m, u.to_vec())
        }
        None => solve_from(sys, z0, m, zeros.clone()),
    };
    let (solved, retried) = match first {
        Some(s) => (s, false),
        None if init.is_some() => match solve_from(sys, z0, m, zeros) {
            Some(s) => (s, true),
            None => {
                return Err(PcfError::InvalidInput(format!(
                    "optimal control diverged from z0={z0:?}"
                )))
            }
        },
        None => {
            return Err(PcfError::InvalidInput(format!(
                "optimal control diverged from z0={z0:?}"
            )))
        }
    };
    let (inputs, _, iterations) = solved;
    let mut grad = vec![0.0; horizon];
    let cost = ocp_cost_and_grad(sys, z0, m, &inputs, &mut grad);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let (states, _) = rollout(sys, z0, m, &inputs);
    let tail_costs = tail_costs(&states, &inputs);
    Ok(OcpResult {
        inputs,
        states,
        tail_costs,
        cost,
        grad_norm,
        iterations,
        converged: grad_norm <= OCP_GRAD_TOL,
        retried,
    })
}

/// Default half-width of the input search interval.
pub const U_MAX: f64 = 50.0;

/// Derivative of `H(z, u) + f(F(z) + G u, m)` with respect to `u`.
fn lookahead_slope(model: &PcfModel, sys: &Pendulum, z: [f64; 2], m: f64, u: f64) -> Result<f64> {
    let next = sys.step(z, m, u);
    let grad = model.grad_x(&next, &[m])?;
    let gain = sys.input_gain(m);
    Ok(0.002 * u + grad[0] * gain[0] + grad[1] * gain[1])
}

/// Minimizer over `u` of the convex one-step lookahead cost
/// `H(z, u) + f(F(z) + G u, m)`: the root of its derivative, found by
/// regula falsi (Illinois) safeguarded with bisection on `[-u_max, u_max]`.
/// The interval is widened tenfold once if it does not bracket the root.
pub fn adp_step(model: &PcfModel, sys: &Pendulum, z: [f64; 2], m: f64, u_max: f64) -> Result<f64> {
    if model.arch.n != 2 || model.arch.p != 1 || model.arch.d != 1 {
        return Err(PcfError::InvalidInput(
            "value model must map (state, mass) to a scalar".into(),
        ));
    }
    let slope = |u: f64| lookahead_slope(model, sys, z, m, u);
    let mut half = u_max;
    let (mut lo, mut hi, mut glo, mut ghi);
    let mut widened = false;
    loop {
        lo = -half;
        hi = half;
        glo = slope(lo)?;
        ghi = slope(hi)?;
        if glo <= 0.0 && ghi >= 0.0 {
            break;
        }
        if widened {
            return Err(PcfError::Bracket(format!(
                "derivative has one sign on [-{half}, {half}] at z={z:?}"
            )));
        }
        half *= 10.0;
        widened = true;
    }
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let mut u = (lo * ghi - hi * glo) / (ghi - glo);
        if !(u > lo && u < hi) {
            u = 0.5 * (lo + hi);
        }
        let g = slope(u)?;
        if g.abs() <= 1e-8 || hi - lo <= 1e-14 * (1.0 + u.abs()) {
            return Ok(u);
        }
        if g < 0.0 {
            lo = u;
            glo = g;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = u;
            ghi = g;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoop {
    pub states: Vec<[f64; 2]>,
    pub inputs: Vec<f64>,
    pub cost: f64,
    /// First step at which the state is within the target box.
    pub reached_at: Option<usize>,
}

/// Whether `z` is within `0.3` rad and `1` rad/s of upright.
pub fn near_upright(z: [f64; 2]) -> bool {
    (z[0] - UPRIGHT[0]).abs() <= 0.3 && z[1].abs() <= 1.0
}

/// Runs the lookahead controller for `steps` steps from `z0`.
pub fn simulate(
    model: &PcfModel,
    sys: &Pendulum,
    z0: [f64; 2],
    m: f64,
    steps: usize,
) -> Result<ClosedLoop> {
    let mut states = vec![z0];
    let mut inputs = Vec::with_capacity(steps);
    let mut cost = 0.0;
    let mut reached_at = near_upright(z0).then_some(0);
    let mut z = z0;
    for t in 0..steps {
        let u = adp_step(model, sys, z, m, U_MAX)?;
        cost += stage_cost(z, u);
        z = sys.step(z, m, u);
        inputs.push(u);
        states.push(z);
        if reached_at.is_none() && near_upright(z) {
            reached_at = Some(t + 1);
        }
    }
    Ok(ClosedLoop {
        states,
        inputs,
        cost,
        reached_at,
    })
}

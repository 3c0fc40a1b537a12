use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::data::Dataset;
use crate::error::{check_finite, check_len, PcfError, Result};
use crate::layers::{self, MaterializedLayers, Tape};
use crate::psi::{self, psi_forward, PsiTape, WeightVector};

/// Per-coordinate affine standardization `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

fn column_stats(data: &[f64], width: usize, rows: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    let mut scale = vec![1.0; width];
    if rows == 0 {
        return (mean, scale);
    }
    for c in 0..width {
        let m = (0..rows).map(|r| data[r * width + c]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (data[r * width + c] - m).powi(2))
            .sum::<f64>()
            / rows as f64;
        let sd = var.sqrt();
        mean[c] = m;
        scale[c] = if sd > 1e-12 * (1.0 + m.abs()) {
            sd
        } else {
            1.0
        };
    }
    (mean, scale)
}

impl Scaling {
    /// z-score statistics of the training data. With `scale_y == false` the
    /// output map is the identity (classification labels).
    pub fn fit(data: &Dataset, scale_y: bool) -> Self {
        let rows = data.len();
        let (x_mean, x_scale) = column_stats(data.x_flat(), data.n, rows);
        let (theta_mean, theta_scale) = column_stats(data.theta_flat(), data.p, rows);
        let (y_mean, y_scale) = if scale_y {
            column_stats(data.y_flat(), data.d, rows)
        } else {
            (vec![0.0; data.d], vec![1.0; data.d])
        };
        Scaling {
            x_mean,
            x_scale,
            theta_mean,
            theta_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn identity(n: usize, p: usize, d: usize) -> Self {
        Scaling {
            x_mean: vec![0.0; n],
            x_scale: vec![1.0; n],
            theta_mean: vec![0.0; p],
            theta_scale: vec![1.0; p],
            y_mean: vec![0.0; d],
            y_scale: vec![1.0; d],
        }
    }

    pub fn scale_x(&self, x: &[f64]) -> Vec<f64> {
        standardize(x, &self.x_mean, &self.x_scale)
    }

    pub fn scale_theta(&self, theta: &[f64]) -> Vec<f64> {
        standardize(theta, &self.theta_mean, &self.theta_scale)
    }

    pub fn scale_y(&self, y: &[f64]) -> Vec<f64> {
        standardize(y, &self.y_mean, &self.y_scale)
    }

    pub fn unscale_y(&self, y: &mut [f64]) {
        for ((v, m), s) in y.iter_mut().zip(&self.y_mean).zip(&self.y_scale) {
            *v = m + s * *v;
        }
    }

    /// Standardized copy of a dataset.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let x = data
            .x_flat()
            .chunks(data.n.max(1))
            .flat_map(|r| self.scale_x(r))
            .collect();
        let theta = data
            .theta_flat()
            .chunks(data.p.max(1))
            .flat_map(|r| self.scale_theta(r))
            .collect();
        let y = data
            .y_flat()
            .chunks(data.d.max(1))
            .flat_map(|r| self.scale_y(r))
            .collect();
        let x = if data.n == 0 { Vec::new() } else { x };
        let theta = if data.p == 0 { Vec::new() } else { theta };
        let y = if data.d == 0 { Vec::new() } else { y };
        Dataset::new(data.n, data.p, data.d, x, theta, y)
    }
}

/// `v / s - m / s`, written as the affine map `(1/s) v + (-m/s)` so exported
/// graphs reproduce it bit for bit.
fn standardize(v: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(mean)
        .zip(scale)
        .map(|((a, m), s)| -m / s + (1.0 / s) * a)
        .collect()
}

/// A fitted parametrized convex function.
#[derive(Debug, Clone, PartialEq)]
pub struct PcfModel {
    pub arch: Architecture,
    pub weights: WeightVector,
    pub scaling: Option<Scaling>,
}

impl PcfModel {
    pub fn new(
        arch: Architecture,
        weights: WeightVector,
        scaling: Option<Scaling>,
    ) -> Result<Self> {
        check_len("weights", arch.weight_len(), weights.len())?;
        check_finite("weights", weights.as_slice())?;
        if arch.scaling != scaling.is_some() {
            return Err(PcfError::InvalidInput(format!(
                "architecture has scaling {} but {} statistics were given",
                if arch.scaling { "on" } else { "off" },
                if scaling.is_some() { "scaling" } else { "no" }
            )));
        }
        if let Some(s) = &scaling {
            check_len("x scaling", arch.n, s.x_mean.len())?;
            check_len("x scaling", arch.n, s.x_scale.len())?;
            check_len("theta scaling", arch.p, s.theta_mean.len())?;
            check_len("theta scaling", arch.p, s.theta_scale.len())?;
            check_len("y scaling", arch.d, s.y_mean.len())?;
            check_len("y scaling", arch.d, s.y_scale.len())?;
        }
        Ok(PcfModel {
            arch,
            weights,
            scaling,
        })
    }

    fn check_args(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        check_len("x", self.arch.n, x.len())?;
        check_len("theta", self.arch.p, theta.len())?;
        check_finite("x", x)?;
        check_finite("theta", theta)
    }

    /// Weight blocks for `theta` given in original (unscaled) units.
    pub fn materialize(&self, theta: &[f64]) -> Result<MaterializedLayers> {
        check_len("theta", self.arch.p, theta.len())?;
        let th = match &self.scaling {
            Some(s) => s.scale_theta(theta),
            None => theta.to_vec(),
        };
        psi_forward(&self.arch, &self.weights, &th)
    }

    pub fn evaluate(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, theta)?;
        let layers = self.materialize(theta)?;
        self.evaluate_with(&layers, x)
    }

    /// Evaluates with weights already materialized by [`Self::materialize`].
    pub fn evaluate_with(&self, layers: &MaterializedLayers, x: &[f64]) -> Result<Vec<f64>> {
        match &self.scaling {
            None => layers::icnn_forward(layers, &self.arch, x),
            Some(s) => {
                let mut y = layers::icnn_forward(layers, &self.arch, &s.scale_x(x))?;
                s.unscale_y(&mut y);
                Ok(y)
            }
        }
    }

    /// Jacobian of `f(., theta)` at `x`, `d x n` row-major.
    pub fn grad_x(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, theta)?;
        let layers = self.materialize(theta)?;
        match &self.scaling {
            None => layers::icnn_jacobian(&layers, &self.arch, x),
            Some(s) => {
                let mut jac = layers::icnn_jacobian(&layers, &self.arch, &s.scale_x(x))?;
                let n = self.arch.n;
                for (i, row) in jac.chunks_mut(n.max(1)).enumerate().take(self.arch.d) {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v *= s.y_scale[i] / s.x_scale[j];
                    }
                }
                Ok(jac)
            }
        }
    }

    /// Predictions for every sample (`N x d` row-major). psi is evaluated
    /// once per distinct `theta`.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_len("data x", self.arch.n, data.n)?;
        check_len("data theta", self.arch.p, data.p)?;
        let d = self.arch.d;
        let mut out = vec![0.0; data.len() * d];
        let idx: Vec<usize> = (0..data.len()).collect();
        let lay = self.arch.layout();
        let mut ptape = PsiTape::new(&self.arch);
        let mut tape = Tape::new(lay);
        for group in data.group_by_theta(&idx) {
            let th = match &self.scaling {
                Some(s) => s.scale_theta(data.theta(group.rep)),
                None => data.theta(group.rep).to_vec(),
            };
            psi::forward(&self.arch, &self.weights.0, &th, &mut ptape)?;
            for &k in &group.samples {
                let x = match &self.scaling {
                    Some(s) => s.scale_x(data.x(k)),
                    None => data.x(k).to_vec(),
                };
                layers::forward(lay, self.arch.activation, &ptape.out, &x, &mut tape)?;
                let dst = &mut out[k * d..(k + 1) * d];
                dst.copy_from_slice(&tape.y);
                if let Some(s) = &self.scaling {
                    s.unscale_y(dst);
                }
            }
        }
        Ok(out)
    }
}

//! Loss functions, weight regularizers and the error-rate test metric.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arch::softplus;
use crate::data::Dataset;
use crate::error::{check_len, PcfError, Result};
use crate::model::PcfModel;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    #[default]
    Quadratic,
    L1,
    Huber {
        delta: f64,
    },
    /// `log(1 + exp(-y f))` with labels in `{-1, +1}`.
    Logistic,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Huber { delta } if !(*delta > 0.0 && delta.is_finite()) => Err(
                PcfError::InvalidInput(format!("huber delta must be positive, got {delta}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LossSpec::Logistic)
    }

    /// Elementwise loss and its derivative with respect to the prediction.
    #[inline]
    pub(crate) fn value_and_deriv(&self, pred: f64, target: f64) -> (f64, f64) {
        match *self {
            LossSpec::Quadratic => {
                let r = pred - target;
                (r * r, 2.0 * r)
            }
            LossSpec::L1 => {
                let r = pred - target;
                let g = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), g)
            }
            LossSpec::Huber { delta } => {
                let r = pred - target;
                if r.abs() <= delta {
                    (0.5 * r * r, r)
                } else {
                    (delta * (r.abs() - 0.5 * delta), delta * r.signum())
                }
            }
            LossSpec::Logistic => {
                let m = -target * pred;
                (softplus(m), -target * crate::arch::sigmoid(m))
            }
        }
    }
}

pub(crate) fn check_labels(y: &[f64]) -> Result<()> {
    match y.iter().find(|v| **v != 1.0 && **v != -1.0) {
        Some(v) => Err(PcfError::InvalidLabel(*v)),
        None => Ok(()),
    }
}

/// Mean loss over all entries of `y_pred` / `y_true`.
pub fn loss_value(spec: &LossSpec, y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    check_len("y_pred", y_true.len(), y_pred.len())?;
    spec.validate()?;
    if spec.is_classification() {
        check_labels(y_true)?;
    }
    if y_true.is_empty() {
        return Err(PcfError::InvalidInput("loss of an empty set".into()));
    }
    let total: f64 = y_pred
        .iter()
        .zip(y_true)
        .map(|(p, t)| spec.value_and_deriv(*p, *t).0)
        .sum();
    Ok(total / y_true.len() as f64)
}

/// Fraction of samples with `y f(x, theta) < 0`; `f = 0` counts as correct.
pub fn error_rate(model: &PcfModel, data: &Dataset) -> Result<f64> {
    check_labels(data.y_flat())?;
    let pred = model.predict(data)?;
    error_rate_of(&pred, data.y_flat())
}

pub fn error_rate_of(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_len("predictions", labels.len(), pred.len())?;
    check_labels(labels)?;
    if labels.is_empty() {
        return Err(PcfError::InvalidInput("error rate of an empty set".into()));
    }
    let wrong = pred
        .iter()
        .zip(labels)
        .filter(|(f, y)| **y * **f < 0.0)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegKind {
    #[default]
    None,
    L2,
    L1,
    ElasticNet {
        alpha_l2: f64,
        alpha_l1: f64,
    },
}

impl RegKind {
    /// `r(w)`, adding `lambda * dr/dw` into `grad`.
    pub(crate) fn value_and_grad(&self, lambda: f64, w: &[f64], grad: &mut [f64]) -> f64 {
        let (a2, a1) = match *self {
            RegKind::None => return 0.0,
            RegKind::L2 => (1.0, 0.0),
            RegKind::L1 => (0.0, 1.0),
            RegKind::ElasticNet { alpha_l2, alpha_l1 } => (alpha_l2, alpha_l1),
        };
        if lambda == 0.0 {
            return 0.0;
        }
        let mut r = 0.0;
        for (g, v) in grad.iter_mut().zip(w) {
            let sign = if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            };
            r += a2 * v * v + a1 * v.abs();
            *g += lambda * (2.0 * a2 * v + a1 * sign);
        }
        lambda * r
    }
}

type VecFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Where the fitted function should be minimized: `g(theta)` and, for the
/// tilted variant, the target gradient `q(theta)` (`d x n` row-major).
#[derive(Clone)]
pub struct ArgminTarget {
    pub point: Arc<VecFn>,
    pub tilt: Option<Arc<VecFn>>,
}

impl ArgminTarget {
    pub fn new(point: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        ArgminTarget {
            point: Arc::new(point),
            tilt: None,
        }
    }

    pub fn constant(point: Vec<f64>) -> Self {
        Self::new(move |_| point.clone())
    }

    pub fn with_tilt(mut self, tilt: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.tilt = Some(Arc::new(tilt));
        self
    }
}

impl fmt::Debug for ArgminTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArgminTarget")
            .field("tilted", &self.tilt.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RegSpec {
    pub lambda: f64,
    pub kind: RegKind,
    pub rho_min: f64,
    pub argmin: Option<ArgminTarget>,
}

impl RegSpec {
    pub fn none() -> Self {
        RegSpec::default()
    }

    pub fn l2(lambda: f64) -> Self {
        RegSpec {
            lambda,
            kind: RegKind::L2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PcfError::InvalidInput(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.rho_min >= 0.0 && self.rho_min.is_finite()) {
            return Err(PcfError::InvalidInput(format!(
                "rho_min must be >= 0, got {}",
                self.rho_min
            )));
        }
        if self.rho_min > 0.0 && self.argmin.is_none() {
            return Err(PcfError::InvalidInput(
                "rho_min > 0 requires an argmin target".into(),
            ));
        }
        if let RegKind::ElasticNet { alpha_l2, alpha_l1 } = self.kind {
            if !(alpha_l2 >= 0.0 && alpha_l1 >= 0.0) {
                return Err(PcfError::InvalidInput(
                    "elastic-net weights must be >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_zero_on_match() {
        let y = [1.0, -2.0, 3.5];
        assert_eq!(loss_value(&LossSpec::Quadratic, &y, &y).unwrap(), 0.0);
    }

    #[test]
    fn logistic_at_zero_is_log2() {
        let v = loss_value(&LossSpec::Logistic, &[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!(v, std::f64::consts::LN_2);
    }

    #[test]
    fn huber_beyond_threshold() {
        let v = loss_value(&LossSpec::Huber { delta: 1.0 }, &[2.0], &[0.0]).unwrap();
        assert_eq!(v, 1.5);
        let v = loss_value(&LossSpec::Huber { delta: 1.0 }, &[0.5], &[0.0]).unwrap();
        assert_eq!(v, 0.125);
    }

    #[test]
    fn l1_is_mean_absolute() {
        let v = loss_value(&LossSpec::L1, &[1.0, -1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 1.5);
    }

    #[test]
    fn logistic_rejects_bad_labels() {
        assert_eq!(
            loss_value(&LossSpec::Logistic, &[0.0], &[0.5]),
            Err(PcfError::InvalidLabel(0.5))
        );
        assert!(LossSpec::Huber { delta: 0.0 }.validate().is_err());
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        let (v, g) = LossSpec::Logistic.value_and_deriv(-800.0, 1.0);
        assert_eq!(v, 800.0);
        assert_eq!(g, -1.0);
        let (v, g) = LossSpec::Logistic.value_and_deriv(800.0, 1.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn error_rate_counting() {
        assert_eq!(error_rate_of(&[1.0, -2.0], &[1.0, -1.0]).unwrap(), 0.0);
        // boundary counts as correct
        assert_eq!(
            error_rate_of(&[0.0, 0.0, 0.0], &[1.0, -1.0, 1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            error_rate_of(&[1.0, 1.0, -1.0, 1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap(),
            0.25
        );
    }

    #[test]
    fn regularizer_gradients() {
        let w = [1.0, -2.0, 0.0];
        let mut g = [0.0; 3];
        let v = RegKind::L2.value_and_grad(0.5, &w, &mut g);
        assert_eq!(v, 2.5);
        assert_eq!(g, [1.0, -2.0, 0.0]);
        let mut g = [0.0; 3];
        let v = RegKind::ElasticNet {
            alpha_l2: 1e-8,
            alpha_l1: 0.1,
        }
        .value_and_grad(1.0, &w, &mut g);
        assert!((v - (5e-8 + 0.3)).abs() < 1e-15);
        assert!((g[0] - (2e-8 + 0.1)).abs() < 1e-15);
        assert_eq!(g[2], 0.0);
    }
}

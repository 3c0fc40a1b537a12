//! JSON run configuration. Every section and field is optional; unknown keys
//! are rejected so that typos fail loudly.

use std::path::Path;

use pcf_core::{
    Activation, Architecture, ArgminTarget, CvConfig, LossSpec, Monotonicity, PcfError, Quadratic,
    RegKind, RegSpec, Result, TrainConfig,
};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub widths: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub psi_hidden: Option<Vec<usize>>,
    pub psi_activation: Option<Activation>,
    pub monotonicity: Option<Vec<Monotonicity>>,
    pub quadratic: Quadratic,
    pub scaling: bool,
}

impl ArchConfig {
    pub fn build(&self, n: usize, p: usize, d: usize) -> Result<Architecture> {
        let mut b = Architecture::builder(n, p, d)
            .quadratic(self.quadratic)
            .scaling(self.scaling);
        if let Some(w) = &self.widths {
            b = b.widths(w.clone());
        }
        if let Some(a) = self.activation {
            b = b.activation(a);
        }
        if let Some(h) = &self.psi_hidden {
            b = b.psi_hidden(h.clone());
        }
        if let Some(a) = self.psi_activation {
            b = b.psi_activation(a);
        }
        if let Some(m) = &self.monotonicity {
            b = b.monotonicity(m.clone());
        }
        b.build()
    }
}

/// Minimizer the fitted function is pushed toward, fixed across `theta`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgminConfig {
    pub point: Vec<f64>,
    /// Target gradient at `point`, `d x n` row-major.
    #[serde(default)]
    pub tilt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub lambda: f64,
    pub kind: RegKind,
    pub rho_min: f64,
    pub argmin: Option<ArgminConfig>,
}

impl RegConfig {
    pub fn build(&self, n: usize, d: usize) -> Result<RegSpec> {
        let argmin = match &self.argmin {
            None => None,
            Some(a) => {
                if a.point.len() != n {
                    return Err(PcfError::InvalidInput(format!(
                        "argmin point has {} entries, data has n = {n}",
                        a.point.len()
                    )));
                }
                let mut t = ArgminTarget::constant(a.point.clone());
                if let Some(q) = &a.tilt {
                    if q.len() != n * d {
                        return Err(PcfError::InvalidInput(format!(
                            "argmin tilt has {} entries, expected d * n = {}",
                            q.len(),
                            n * d
                        )));
                    }
                    let q = q.clone();
                    t = t.with_tilt(move |_| q.clone());
                }
                Some(t)
            }
        };
        let spec = RegSpec {
            lambda: self.lambda,
            kind: self.kind,
            rho_min: self.rho_min,
            argmin,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchConfig,
    pub loss: LossSpec,
    pub regularization: RegConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    /// Held-out share when no test file is given.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: ArchConfig::default(),
            loss: LossSpec::default(),
            regularization: RegConfig::default(),
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| PcfError::InvalidInput(format!("config: {e}")))?;
        if !(0.0..1.0).contains(&cfg.test_fraction) {
            return Err(PcfError::InvalidInput(format!(
                "test_fraction must be in [0, 1), got {}",
                cfg.test_fraction
            )));
        }
        cfg.loss.validate()?;
        cfg.train.validate()?;
        if cfg.cv.enabled {
            cfg.cv.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PcfError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.test_fraction, 0.2);
        assert_eq!(c.loss, LossSpec::Quadratic);
    }

    #[test]
    fn nested_fields() {
        let c = RunConfig::parse(
            r#"{"architecture": {"widths": [3, 3], "activation": "softplus", "quadratic": {"low_rank": 1}},
                "loss": {"kind": "huber", "delta": 0.5},
                "regularization": {"lambda": 0.01, "kind": {"kind": "elastic_net", "alpha_l2": 1.0, "alpha_l1": 0.5}},
                "train": {"n_starts": 2, "seed": 7}}"#,
        )
        .unwrap();
        let arch = c.architecture.build(2, 1, 1).unwrap();
        assert_eq!(arch.widths, vec![3, 3]);
        assert_eq!(arch.quadratic, Quadratic::LowRank(1));
        assert_eq!(c.loss, LossSpec::Huber { delta: 0.5 });
        assert_eq!(c.train.starts(), 2);
        assert!(c.regularization.build(2, 1).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"trian": {}}"#,
            r#"{"train": {"adam_iter": 3}}"#,
            r#"{"architecture": {"width": [2]}}"#,
            r#"{"cv": {"fold": 3}}"#,
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn argmin_dimensions_checked() {
        let c =
            RunConfig::parse(r#"{"regularization": {"rho_min": 1.0, "argmin": {"point": [0.0]}}}"#)
                .unwrap();
        assert!(c.regularization.build(2, 1).is_err());
        assert!(c.regularization.build(1, 1).is_ok());
    }
}

//! Scores and K-fold cross-validation over the regularization weight.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::data::Dataset;
use crate::error::{check_len, PcfError, Result};
use crate::loss::{error_rate_of, loss_value, LossSpec, RegSpec};
use crate::model::PcfModel;
use crate::training::{fit, FitReport, TestMetrics, TrainConfig};

/// Coefficient of determination, averaged uniformly over the `d` outputs of
/// row-major `N x d` arrays. A constant target scores 1 when predicted
/// exactly and 0 otherwise.
pub fn r2_score(y_pred: &[f64], y_true: &[f64], d: usize) -> Result<f64> {
    check_len("predictions", y_true.len(), y_pred.len())?;
    if d == 0 || y_true.len() % d != 0 {
        return Err(PcfError::InvalidInput(format!(
            "{} values do not form rows of width {d}",
            y_true.len()
        )));
    }
    let rows = y_true.len() / d;
    if rows < 2 {
        return Err(PcfError::InvalidInput("r2 needs at least 2 samples".into()));
    }
    let mut total = 0.0;
    for i in 0..d {
        let mean = (0..rows).map(|k| y_true[k * d + i]).sum::<f64>() / rows as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for k in 0..rows {
            let t = y_true[k * d + i];
            ss_res += (t - y_pred[k * d + i]).powi(2);
            ss_tot += (t - mean).powi(2);
        }
        total += if ss_tot == 0.0 {
            if ss_res == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - ss_res / ss_tot
        };
    }
    Ok(total / d as f64)
}

/// Root of the mean squared error over all entries.
pub fn rmse(y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    Ok(loss_value(&LossSpec::Quadratic, y_pred, y_true)?.sqrt())
}

/// R², RMSE, loss and (for classification) error rate of `model` on `data`.
pub fn test_metrics(model: &PcfModel, data: &Dataset, loss: &LossSpec) -> Result<TestMetrics> {
    let pred = model.predict(data)?;
    let y = data.y_flat();
    Ok(TestMetrics {
        samples: data.len(),
        r2: r2_score(&pred, y, data.d)?,
        rmse: rmse(&pred, y)?,
        loss: loss_value(loss, &pred, y)?,
        error_rate: if loss.is_classification() {
            Some(error_rate_of(&pred, y)?)
        } else {
            None
        },
    })
}

fn default_grid() -> Vec<f64> {
    (-8..=-1).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    pub enabled: bool,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            lambda_grid: default_grid(),
            enabled: false,
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(PcfError::InvalidInput(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        if self.lambda_grid.is_empty() {
            return Err(PcfError::InvalidInput("lambda_grid is empty".into()));
        }
        if let Some(l) = self
            .lambda_grid
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return Err(PcfError::InvalidInput(format!(
                "lambda_grid entry {l} is not >= 0"
            )));
        }
        Ok(())
    }
}

/// Validation scores of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Per-fold score; absent where the fold fit failed.
    pub fold_scores: Vec<Option<f64>>,
    /// Mean over folds, absent when the candidate was dropped.
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `r2`, or `accuracy` (one minus error rate) for classification.
    pub metric: String,
    pub folds: usize,
    pub candidates: Vec<LambdaScore>,
}

/// Seeded shuffle split into `k` contiguous blocks whose sizes differ by at
/// most one.
pub fn fold_indices(len: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = len / k;
    let extra = len % k;
    let mut out = Vec::with_capacity(k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[pos..pos + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        pos += size;
    }
    out
}

fn validation_score(model: &PcfModel, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    let pred = model.predict(data)?;
    if loss.is_classification() {
        Ok(1.0 - error_rate_of(&pred, data.y_flat())?)
    } else {
        r2_score(&pred, data.y_flat(), data.d)
    }
}

/// Picks `lambda` from the grid by K-fold cross-validation (highest mean
/// score, ties toward the smaller `lambda`), then refits on all of `data`.
pub fn cross_validate(
    arch: &Architecture,
    data: &Dataset,
    loss: &LossSpec,
    reg_template: &RegSpec,
    cv: &CvConfig,
    cfg: &TrainConfig,
) -> Result<(PcfModel, FitReport)> {
    cv.validate()?;
    if data.len() < cv.folds {
        return Err(PcfError::InvalidInput(format!(
            "{} samples cannot form {} folds",
            data.len(),
            cv.folds
        )));
    }
    let folds = fold_indices(data.len(), cv.folds, cv.seed);
    let mut candidates = Vec::with_capacity(cv.lambda_grid.len());
    for &lambda in &cv.lambda_grid {
        let reg = RegSpec {
            lambda,
            ..reg_template.clone()
        };
        let mut fold_scores = Vec::with_capacity(folds.len());
        for (f, held) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let mut train_idx = train_idx;
            train_idx.sort_unstable();
            let train = data.subset(&train_idx);
            let valid = data.subset(held);
            let score = match fit(arch, &train, loss, &reg, cfg) {
                Ok((model, _)) => Some(validation_score(&model, &valid, loss)?),
                Err(PcfError::FitFailed(_)) => None,
                Err(e) => return Err(e),
            };
            log::debug!("cv: lambda {lambda:e} fold {f} score {score:?}");
            fold_scores.push(score);
        }
        let mean_score = if fold_scores.iter().all(Option::is_some) {
            Some(fold_scores.iter().flatten().sum::<f64>() / fold_scores.len() as f64)
        } else {
            None
        };
        candidates.push(LambdaScore {
            lambda,
            fold_scores,
            mean_score,
        });
    }
    let chosen = candidates
        .iter()
        .filter_map(|c| c.mean_score.map(|s| (c.lambda, s)))
        .fold(None, |best: Option<(f64, f64)>, (l, s)| match best {
            Some((bl, bs)) if bs > s || (bs == s && bl <= l) => best,
            _ => Some((l, s)),
        });
    let Some((lambda, _)) = chosen else {
        return Err(PcfError::SelectionFailed);
    };
    let reg = RegSpec {
        lambda,
        ..reg_template.clone()
    };
    let (model, mut report) = fit(arch, data, loss, &reg, cfg)?;
    report.cv = Some(CvReport {
        metric: if loss.is_classification() {
            "accuracy"
        } else {
            "r2"
        }
        .into(),
        folds: cv.folds,
        candidates,
    });
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_examples() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(r2_score(&y, &y, 1).unwrap(), 1.0);
        assert_eq!(r2_score(&[1.0, 1.0, 1.0], &y, 1).unwrap(), 0.0);
        // residual sum 1, total sum 2
        assert_eq!(r2_score(&[0.0, 1.0, 1.0], &y, 1).unwrap(), 0.5);
    }

    #[test]
    fn r2_constant_target() {
        assert_eq!(r2_score(&[3.0, 3.0], &[3.0, 3.0], 1).unwrap(), 1.0);
        assert_eq!(r2_score(&[3.0, 2.0], &[3.0, 3.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn r2_averages_outputs() {
        // output 0 perfect, output 1 predicts its mean
        let truth = [0.0, 0.0, 1.0, 2.0];
        let pred = [0.0, 1.0, 1.0, 1.0];
        assert_eq!(r2_score(&pred, &truth, 2).unwrap(), 0.5);
    }

    #[test]
    fn folds_partition_indices() {
        for (len, k) in [(10, 3), (7, 7), (23, 5)] {
            let folds = fold_indices(len, k, 11);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            assert_eq!(all, (0..len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn default_grid_spans_decades() {
        let g = CvConfig::default().lambda_grid;
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 1e-8);
        assert_eq!(g[7], 0.1);
    }
}

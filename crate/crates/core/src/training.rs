//! Fitting: Adam warm-up followed by L-BFGS refinement, repeated from
//! several random initializations on a worker pool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::autodiff::{self, ArgminSample, Batch, Workspace};
use crate::data::Dataset;
use crate::error::{check_len, PcfError, Result};
use crate::loss::{check_labels, LossSpec, RegSpec};
use crate::model::{PcfModel, Scaling};
use crate::optim::{Adam, Lbfgs};
use crate::psi::WeightVector;
use crate::selection::CvReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam_iters: usize,
    pub adam_lr: f64,
    pub lbfgs_iters: usize,
    pub lbfgs_memory: usize,
    /// Number of random initializations; `None` means `max(10, n_workers)`.
    pub n_starts: Option<usize>,
    pub n_workers: usize,
    pub seed: u64,
    /// Adam mini-batch size; `None` runs full-batch Adam.
    pub batch_size: Option<usize>,
    /// Cap on objective evaluations in the L-BFGS stage.
    pub max_evals: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_iters: 200,
            adam_lr: 1e-3,
            lbfgs_iters: 2000,
            lbfgs_memory: 10,
            n_starts: None,
            n_workers: 4,
            seed: 0,
            batch_size: None,
            max_evals: None,
        }
    }
}

impl TrainConfig {
    pub fn starts(&self) -> usize {
        self.n_starts.unwrap_or(self.n_workers.max(10))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            return Err(PcfError::InvalidInput(format!(
                "adam_lr must be positive, got {}",
                self.adam_lr
            )));
        }
        if self.starts() == 0 {
            return Err(PcfError::InvalidInput("n_starts must be at least 1".into()));
        }
        if self.n_workers == 0 {
            return Err(PcfError::InvalidInput(
                "n_workers must be at least 1".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(PcfError::InvalidInput(
                "batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Endpoint of one initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: usize,
    pub failed: bool,
    /// Final full-data training objective (absent for failed starts).
    pub objective: Option<f64>,
    pub adam_objective: Option<f64>,
    pub lbfgs_iterations: usize,
    pub lbfgs_evaluations: usize,
    pub lbfgs_status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Held-out metrics of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub samples: usize,
    pub r2: f64,
    pub rmse: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub chosen_lambda: f64,
    pub best_start: usize,
    pub train_objective: f64,
    pub starts: Vec<StartReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestMetrics>,
}

/// The full training objective on a (possibly standardized) dataset.
pub struct Objective<'a> {
    arch: &'a Architecture,
    full: Batch<'a>,
    loss: LossSpec,
    reg: &'a RegSpec,
    argmin: Vec<ArgminSample>,
}

impl<'a> Objective<'a> {
    /// `data` must already be in the model's standardized coordinates
    /// described by `scaling`; argmin targets are mapped into them.
    pub fn new(
        arch: &'a Architecture,
        data: &'a Dataset,
        loss: LossSpec,
        reg: &'a RegSpec,
        scaling: Option<&Scaling>,
    ) -> Result<Self> {
        check_len("data x", arch.n, data.n)?;
        check_len("data theta", arch.p, data.p)?;
        check_len("data y", arch.d, data.d)?;
        if data.is_empty() {
            return Err(PcfError::InvalidInput("training data is empty".into()));
        }
        loss.validate()?;
        reg.validate()?;
        autodiff::check_argmin_supported(arch, reg.rho_min)?;
        if loss.is_classification() {
            check_labels(data.y_flat())?;
        }
        let full = Batch::full(data);
        let argmin = match (&reg.argmin, reg.rho_min > 0.0) {
            (Some(target), true) => argmin_samples(arch, &full, target, scaling)?,
            _ => Vec::new(),
        };
        Ok(Objective {
            arch,
            full,
            loss,
            reg,
            argmin,
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.weight_len()
    }

    /// Objective on `batch` (the full data when `None`) plus regularizers,
    /// writing the gradient into `grad`.
    pub(crate) fn eval(
        &self,
        w: &[f64],
        batch: Option<&Batch<'_>>,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch = batch.unwrap_or(&self.full);
        let mut v = autodiff::data_term(self.arch, w, batch, &self.loss, ws, grad)?;
        v += self.reg.kind.value_and_grad(self.reg.lambda, w, grad);
        v += autodiff::argmin_term(self.arch, w, &self.argmin, self.reg.rho_min, ws, grad)?;
        if !v.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(PcfError::NonFiniteIntermediate {
                stage: "objective",
                layer: 0,
            });
        }
        Ok(v)
    }

    pub fn value_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("weights", self.dim(), w.len())?;
        let mut ws = Workspace::new(self.arch);
        let mut grad = vec![0.0; w.len()];
        let v = self.eval(w, None, &mut ws, &mut grad)?;
        Ok((v, grad))
    }
}

/// One argmin term per distinct `theta`, weighted by its share of samples.
fn argmin_samples(
    arch: &Architecture,
    full: &Batch<'_>,
    target: &crate::loss::ArgminTarget,
    scaling: Option<&Scaling>,
) -> Result<Vec<ArgminSample>> {
    let total = full.len() as f64;
    let mut out = Vec::with_capacity(full.num_groups());
    for (theta_s, count) in full.group_thetas() {
        // targets are functions of the original parameter
        let theta: Vec<f64> = match scaling {
            Some(s) => theta_s
                .iter()
                .zip(s.theta_mean.iter().zip(&s.theta_scale))
                .map(|(v, (m, sd))| m + sd * v)
                .collect(),
            None => theta_s.to_vec(),
        };
        let mut point = (target.point)(&theta);
        check_len("argmin point", arch.n, point.len())?;
        let mut tilt = match &target.tilt {
            Some(q) => {
                let q = q(&theta);
                check_len("argmin tilt", arch.n * arch.d, q.len())?;
                Some(q)
            }
            None => None,
        };
        if let Some(s) = scaling {
            point = s.scale_x(&point);
            if let Some(q) = tilt.as_mut() {
                for (i, row) in q.chunks_mut(arch.n.max(1)).enumerate().take(arch.d) {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v *= s.x_scale[j] / s.y_scale[i];
                    }
                }
            }
        }
        out.push(ArgminSample {
            theta: theta_s.to_vec(),
            point,
            tilt,
            weight: count as f64 / total,
        });
    }
    Ok(out)
}

fn run_start(
    obj: &Objective<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
    start: usize,
) -> (StartReport, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(start as u64);
    let w0 = WeightVector::init(obj.arch, &mut rng).0;
    let mut ws = Workspace::new(obj.arch);
    let mut report = StartReport {
        start,
        failed: false,
        objective: None,
        adam_objective: None,
        lbfgs_iterations: 0,
        lbfgs_evaluations: 0,
        lbfgs_status: String::new(),
        error: None,
    };
    let mut last_error: Option<PcfError> = None;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let adam = Adam {
        lr: cfg.adam_lr,
        iters: cfg.adam_iters,
        ..Default::default()
    };
    let full_batch = cfg.batch_size.map_or(true, |b| b >= data.len());
    let adam_out = adam.run(
        |step, w, g| {
            let batch = if full_batch || step == cfg.adam_iters {
                None
            } else {
                let b = cfg.batch_size.unwrap_or(data.len());
                if cursor + b > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + b];
                cursor += b;
                Some(Batch::new(data, idx))
            };
            match obj.eval(w, batch.as_ref(), &mut ws, g) {
                Ok(v) => v,
                Err(e) => {
                    last_error = Some(e);
                    f64::NAN
                }
            }
        },
        w0,
        full_batch,
    );
    if adam_out.diverged || !adam_out.f.is_finite() {
        report.failed = true;
        report.error = Some(
            last_error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "non-finite objective".into()),
        );
        return (report, adam_out.x);
    }
    report.adam_objective = Some(adam_out.f);

    let lbfgs = Lbfgs {
        memory: cfg.lbfgs_memory,
        max_iters: cfg.lbfgs_iters,
        max_evals: cfg.max_evals,
        ..Default::default()
    };
    let out = lbfgs.minimize(
        |w, g| obj.eval(w, None, &mut ws, g).unwrap_or(f64::NAN),
        adam_out.x,
    );
    report.lbfgs_iterations = out.iterations;
    report.lbfgs_evaluations = out.evaluations;
    report.lbfgs_status = format!("{:?}", out.status);
    if out.f.is_finite() {
        report.objective = Some(out.f);
    } else {
        report.failed = true;
        report.error = Some("non-finite objective".into());
    }
    (report, out.x)
}

/// Runs every start and returns the per-start reports with the weights of
/// the best one.
pub(crate) fn multi_start(
    obj: &Objective<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<StartReport>, usize, Vec<f64>)> {
    let starts = cfg.starts();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.n_workers)
        .build()
        .map_err(|e| PcfError::InvalidInput(format!("worker pool: {e}")))?;
    let results: Vec<(StartReport, Vec<f64>)> = pool.install(|| {
        (0..starts)
            .into_par_iter()
            .map(|s| run_start(obj, data, cfg, s))
            .collect()
    });
    let best = results
        .iter()
        .filter_map(|(r, _)| r.objective.filter(|_| !r.failed).map(|f| (r.start, f)))
        .fold(None, |acc: Option<(usize, f64)>, (s, f)| match acc {
            Some((_, bf)) if bf <= f => acc,
            _ => Some((s, f)),
        });
    let Some((best, _)) = best else {
        return Err(PcfError::FitFailed(starts));
    };
    let mut reports = Vec::with_capacity(starts);
    let mut weights = Vec::new();
    for (r, w) in results {
        if r.start == best {
            weights = w;
        }
        reports.push(r);
    }
    Ok((reports, best, weights))
}

/// Fits a model to `data`. Samples sharing a bitwise-identical `theta` share
/// one hypernetwork evaluation.
pub fn fit(
    arch: &Architecture,
    data: &Dataset,
    loss: &LossSpec,
    reg: &RegSpec,
    cfg: &TrainConfig,
) -> Result<(PcfModel, FitReport)> {
    cfg.validate()?;
    let scaling = arch
        .scaling
        .then(|| Scaling::fit(data, !loss.is_classification()));
    let scaled;
    let train = match &scaling {
        Some(s) => {
            scaled = s.apply(data)?;
            &scaled
        }
        None => data,
    };
    let obj = Objective::new(arch, train, *loss, reg, scaling.as_ref())?;
    let (starts, best, w) = multi_start(&obj, train, cfg)?;
    let train_objective = starts[best].objective.unwrap_or(f64::NAN);
    log::info!(
        "fit: best start {best} of {} with objective {train_objective:.6e}",
        starts.len()
    );
    let model = PcfModel::new(arch.clone(), WeightVector(w), scaling)?;
    Ok((
        model,
        FitReport {
            chosen_lambda: reg.lambda,
            best_start: best,
            train_objective,
            starts,
            cv: None,
            test: None,
        },
    ))
}

/// Training objective of a fitted model on `data`, in the model's own
/// standardized coordinates (the quantity minimized by [`fit`]).
pub fn training_objective(
    model: &PcfModel,
    data: &Dataset,
    loss: &LossSpec,
    reg: &RegSpec,
) -> Result<f64> {
    let scaled;
    let train = match &model.scaling {
        Some(s) => {
            scaled = s.apply(data)?;
            &scaled
        }
        None => data,
    };
    let obj = Objective::new(&model.arch, train, *loss, reg, model.scaling.as_ref())?;
    Ok(obj.value_and_grad(model.weights.as_slice())?.0)
}

//! Synthetic benchmarks: data generators, fitting harnesses with fixed
//! per-experiment settings, and a runner that writes metrics and CSVs.

pub mod adp;
pub mod battery;
pub mod classification;
pub mod pendulum;
pub mod pwa;
pub mod quadratic;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{column_names, format_f64, Dataset};
use crate::error::{PcfError, Result};
use crate::export::save_model;
use crate::model::PcfModel;
use crate::training::{FitReport, TrainConfig};

/// How much data and optimizer work an experiment gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Seconds; for plumbing tests.
    Smoke,
    /// Minutes on a laptop.
    Desk,
    /// The sizes and iteration counts of the original study.
    Paper,
}

impl FromStr for Scale {
    type Err = PcfError;

    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(PcfError::InvalidInput(format!(
                "unknown scale {other:?} (expected smoke, desk or paper)"
            ))),
        }
    }
}

impl Scale {
    fn smoke_train(self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam_iters: 20,
            lbfgs_iters: 50,
            n_starts: Some(1),
            n_workers: 1,
            seed,
            ..Default::default()
        }
    }

    fn desk_train(self, seed: u64) -> TrainConfig {
        TrainConfig {
            n_starts: Some(4),
            seed,
            ..Default::default()
        }
    }
}

pub const EXPERIMENTS: &[&str] = &["pwa", "quadratic", "battery", "adp", "classification"];

/// A fitted model with its metrics and held-out predictions.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub metrics: M,
    pub model: PcfModel,
    pub report: FitReport,
    pub test: Dataset,
    pub pred: Vec<f64>,
}

fn write_predictions(path: &Path, data: &Dataset, pred: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PcfError::Io(e.to_string()))?;
    let mut header = column_names(data.n, data.p, data.d);
    header.extend((0..data.d).map(|i| format!("pred{i}")));
    w.write_record(&header)
        .map_err(|e| PcfError::Io(e.to_string()))?;
    for k in 0..data.len() {
        let row: Vec<String> = data
            .x(k)
            .iter()
            .chain(data.theta(k))
            .chain(data.y(k))
            .chain(&pred[k * data.d..(k + 1) * data.d])
            .map(|v| format_f64(*v))
            .collect();
        w.write_record(&row)
            .map_err(|e| PcfError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PcfError::Io(e.to_string()))?;
    w.write_record(header)
        .map_err(|e| PcfError::Io(e.to_string()))?;
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format_f64(*v)).collect();
        w.write_record(&cells)
            .map_err(|e| PcfError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_common<M: Serialize>(dir: Option<&Path>, t: &Trained<M>) -> Result<serde_json::Value> {
    if let Some(dir) = dir {
        write_predictions(&dir.join("predictions.csv"), &t.test, &t.pred)?;
        save_model(&t.model, &dir.join("model.json"))?;
    }
    Ok(serde_json::json!({
        "metrics": t.metrics,
        "fit": t.report,
    }))
}

/// Runs experiment `name` and, when `out_dir` is given, writes
/// `metrics.json`, `model.json`, `predictions.csv` and any
/// experiment-specific CSVs there. Returns the metrics document.
pub fn run_experiment(
    name: &str,
    scale: Scale,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<serde_json::Value> {
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut doc = match name {
        "pwa" => write_common(out_dir, &pwa::run(&pwa::PwaConfig::for_scale(scale, seed))?)?,
        "quadratic" => write_common(
            out_dir,
            &quadratic::run(&quadratic::QuadraticConfig::for_scale(scale, seed))?,
        )?,
        "battery" => write_common(
            out_dir,
            &battery::run(&battery::BatteryConfig::for_scale(scale, seed))?,
        )?,
        "classification" => write_common(
            out_dir,
            &classification::run(&classification::ClassificationConfig::for_scale(
                scale, seed,
            ))?,
        )?,
        "adp" => {
            let out = adp::run(&adp::AdpConfig::for_scale(scale, seed))?;
            let doc = write_common(out_dir, &out.trained)?;
            if let Some(dir) = out_dir {
                let cl = &out.closed_loop;
                let rf = &out.reference;
                write_rows(
                    &dir.join("trajectories.csv"),
                    &[
                        "t",
                        "delta_adp",
                        "rate_adp",
                        "u_adp",
                        "delta_ocp",
                        "rate_ocp",
                        "u_ocp",
                    ],
                    (0..cl.inputs.len()).map(|t| {
                        vec![
                            t as f64,
                            cl.states[t][0],
                            cl.states[t][1],
                            cl.inputs[t],
                            rf.states[t][0],
                            rf.states[t][1],
                            rf.inputs[t],
                        ]
                    }),
                )?;
                write_rows(
                    &dir.join("first_inputs.csv"),
                    &["u_optimal", "u_adp"],
                    out.first_inputs.iter().map(|(a, b)| vec![*a, *b]),
                )?;
            }
            doc
        }
        other => {
            return Err(PcfError::InvalidInput(format!(
                "unknown experiment {other:?} (expected one of {})",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    doc["experiment"] = name.into();
    doc["scale"] = serde_json::to_value(scale).expect("scale serializes");
    doc["seed"] = seed.into();
    if let Some(dir) = out_dir {
        let mut f = BufWriter::new(File::create(dir.join("metrics.json"))?);
        f.write_all(
            serde_json::to_string_pretty(&doc)
                .expect("metrics serialize")
                .as_bytes(),
        )?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    Ok(doc)
}

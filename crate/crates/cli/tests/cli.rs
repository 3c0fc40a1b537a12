//! End-to-end checks of the `pcf` binary: exit codes, file outputs and the
//! consistency of `eval` and `score`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcf_core::export::save_model;
use pcf_core::{Activation, Architecture, Dataset, PcfModel, WeightVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn pcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcf"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// A model with random weights and a dataset labelled by it.
fn planted(dir: &Path, n_rows: usize, classify: bool) -> (PathBuf, PathBuf, PcfModel) {
    let arch = Architecture::builder(2, 1, 1)
        .activation(Activation::Softplus)
        .build()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = PcfModel::new(arch.clone(), WeightVector::init(&arch, &mut rng), None).unwrap();
    let x: Vec<f64> = (0..2 * n_rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let th: Vec<f64> = (0..n_rows).map(|k| (k % 3) as f64 * 0.5).collect();
    let inputs = Dataset::new(2, 1, 0, x.clone(), th.clone(), vec![]).unwrap();
    let mut y = model.predict(&inputs).unwrap();
    if classify {
        let mid = {
            let mut s = y.clone();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        y = y
            .iter()
            .map(|v| if *v > mid { 1.0 } else { -1.0 })
            .collect();
    }
    let data = Dataset::new(2, 1, 1, x, th, y).unwrap();
    let data_path = dir.join(if classify { "labels.csv" } else { "data.csv" });
    data.write_csv(std::fs::File::create(&data_path).unwrap())
        .unwrap();
    let model_path = dir.join("planted.json");
    save_model(&model, &model_path).unwrap();
    (data_path, model_path, model)
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(
        &p,
        r#"{"architecture": {"activation": "softplus"},
            "train": {"n_starts": 1, "n_workers": 1, "adam_iters": 5, "lbfgs_iters": 5}}"#,
    )
    .unwrap();
    p
}

#[test]
fn fit_smoke_writes_model_and_report() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = planted(dir.path(), 10, false);
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("model.json");
    let o = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["test"]["r2"].is_number(), "{report}");
    assert_eq!(report["test"]["samples"], 2);
}

#[test]
fn fit_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = planted(dir.path(), 30, false);
    let cfg = smoke_config(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let oa = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&a),
        "--seed",
        "3",
    ]);
    let ob = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&b),
        "--seed",
        "3",
    ]);
    assert!(oa.status.success() && ob.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(oa.stdout, ob.stdout);
}

#[test]
fn malformed_header_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "x0,th0,zz9\n1,2,3\n").unwrap();
    let o = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--out",
        path(&dir.path().join("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("zz9"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = planted(dir.path(), 10, false);
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"train": {"n_start": 2}}"#).unwrap();
    let o = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_start"), "{}", stderr(&o));
}

#[test]
fn diverging_fit_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = planted(dir.path(), 10, false);
    let cfg = dir.path().join("hot.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"n_starts": 2, "n_workers": 1, "adam_iters": 50, "adam_lr": 1e300, "lbfgs_iters": 0}}"#,
    )
    .unwrap();
    let o = pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn score_of_planted_model() {
    let dir = TempDir::new().unwrap();
    let (data, model, _) = planted(dir.path(), 40, false);
    let o = pcf(&[
        "score",
        "--model",
        path(&model),
        "--data",
        path(&data),
        "--metric",
        "r2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1.0");
    let o = pcf(&[
        "score",
        "--model",
        path(&model),
        "--data",
        path(&data),
        "--metric",
        "rmse",
    ]);
    assert_eq!(stdout(&o).trim(), "0.0");
}

#[test]
fn error_rate_of_consistent_labels_is_zero() {
    let dir = TempDir::new().unwrap();
    let (labels, _, model) = planted(dir.path(), 40, true);
    // shift the planted model so its sign agrees with the median split
    let data = Dataset::read_csv(&labels).unwrap();
    let pred = model.predict(&data).unwrap();
    let mut s = pred.clone();
    s.sort_by(f64::total_cmp);
    let cut = 0.5 * (s[19] + s[20]);
    let mut arch = model.arch.clone();
    arch.scaling = true;
    let shifted = PcfModel::new(
        arch,
        model.weights.clone(),
        Some(pcf_core::Scaling {
            y_mean: vec![-cut],
            ..pcf_core::Scaling::identity(2, 1, 1)
        }),
    )
    .unwrap();
    let mp = dir.path().join("shifted.json");
    save_model(&shifted, &mp).unwrap();
    let o = pcf(&[
        "score",
        "--model",
        path(&mp),
        "--data",
        path(&labels),
        "--metric",
        "error-rate",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.0");
}

#[test]
fn eval_and_score_agree_on_rmse() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = planted(dir.path(), 50, false);
    let cfg = smoke_config(dir.path());
    let model = dir.path().join("fitted.json");
    assert!(pcf(&[
        "fit",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--out",
        path(&model)
    ])
    .status
    .success());
    let e = pcf(&["eval", "--model", path(&model), "--data", path(&data)]);
    assert!(e.status.success(), "{}", stderr(&e));
    let text = stdout(&e);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("pred0"));
    let pred: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    let truth = Dataset::read_csv(&data).unwrap();
    assert_eq!(pred.len(), truth.len());
    let mse = pred
        .iter()
        .zip(truth.y_flat())
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    let s = pcf(&[
        "score",
        "--model",
        path(&model),
        "--data",
        path(&data),
        "--metric",
        "rmse",
    ]);
    let reported: f64 = stdout(&s).trim().parse().unwrap();
    assert!(
        (reported - mse.sqrt()).abs() <= 1e-12,
        "{reported} vs {}",
        mse.sqrt()
    );
}

#[test]
fn export_graph_and_code() {
    let dir = TempDir::new().unwrap();
    let (_, model, _) = planted(dir.path(), 5, false);
    let g = dir.path().join("graph.json");
    let o = pcf(&["export", "--model", path(&model), "--out", path(&g)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let graph: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&g).unwrap()).unwrap();
    assert_eq!(graph["mode"]["kind"], "symbolic_theta");

    let py = dir.path().join("f.py");
    let o = pcf(&[
        "export",
        "--model",
        path(&model),
        "--mode",
        "bound",
        "--theta",
        "-0.5",
        "--format",
        "cvxpy",
        "--out",
        path(&py),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&py)
        .unwrap()
        .contains("import cvxpy"));

    let o = pcf(&[
        "export",
        "--model",
        path(&model),
        "--mode",
        "bound",
        "--out",
        path(&py),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_template_missing_kinds() {
    let dir = TempDir::new().unwrap();
    let (_, model, _) = planted(dir.path(), 5, false);
    let t = dir.path().join("t.tmpl");
    std::fs::write(&t, "@@variable\nx\n").unwrap();
    let o = pcf(&[
        "export",
        "--model",
        path(&model),
        "--template",
        path(&t),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nonneg_matmul"), "{}", stderr(&o));
}

#[test]
fn experiment_smoke_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = pcf(&[
        "experiment",
        "pwa",
        "--scale",
        "smoke",
        "--seed",
        "2",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(doc["metrics"]["rmse_all"].is_number());
    assert!(out.join("metrics.json").exists() && out.join("predictions.csv").exists());
    let o = pcf(&["experiment", "nope", "--scale", "smoke"]);
    assert_eq!(o.status.code(), Some(1));
}

fn python_with_cvxpy() -> bool {
    Command::new("python3")
        .args(["-c", "import cvxpy, numpy"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Runs the generated Python under CVXPY and compares its value with the
/// native model. Skipped when CVXPY is not installed.
#[test]
fn cvxpy_code_matches_native_values() {
    if !python_with_cvxpy() {
        eprintln!("skipping: python3 with cvxpy not available");
        return;
    }
    let dir = TempDir::new().unwrap();
    let (_, model_path, model) = planted(dir.path(), 5, false);
    for (mode, theta) in [("symbolic", None), ("bound", Some(0.7))] {
        let py = dir.path().join(format!("f_{mode}.py"));
        let mut args = vec![
            "export",
            "--model",
            path(&model_path),
            "--mode",
            mode,
            "--format",
            "cvxpy",
            "--out",
            path(&py),
        ];
        let th = theta.map(|t: f64| t.to_string());
        if let Some(t) = &th {
            args.extend(["--theta", t.as_str()]);
        }
        assert!(pcf(&args).status.success());
        let x = [0.3, -0.8];
        let script = format!(
            "import importlib.util, cvxpy as cp\n\
             spec = importlib.util.spec_from_file_location('f', r'{}')\n\
             m = importlib.util.module_from_spec(spec); spec.loader.exec_module(m)\n\
             x = cp.Variable(2); x.value = [{}, {}]\n\
             e = m.pcf(x) if {} else m.pcf(x, [0.7])\n\
             assert e.is_convex()\n\
             import numpy as np\n\
             print(repr(float(np.asarray(e.value).reshape(-1)[0])))\n",
            py.display(),
            x[0],
            x[1],
            if theta.is_some() { "True" } else { "False" },
        );
        let o = Command::new("python3")
            .args(["-c", &script])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let got: f64 = stdout(&o).trim().parse().unwrap();
        let want = model.evaluate(&x, &[0.7]).unwrap()[0];
        assert!(
            (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
            "{mode}: {got} vs {want}"
        );
    }
}

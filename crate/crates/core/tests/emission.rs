//! Golden-file checks of the exported graph and generated code. Set
//! `PCF_UPDATE_GOLDEN=1` to rewrite the files after an intended change.

use std::path::PathBuf;

use pcf_core::export::{emit_code, to_expr_graph, ExportMode, Template, CVXPY_TEMPLATE};
use pcf_core::{Activation, Architecture, PcfModel, Quadratic, WeightVector};

fn fixed_model() -> PcfModel {
    let arch = Architecture::builder(2, 1, 1)
        .widths(vec![2, 2])
        .psi_hidden(vec![2])
        .activation(Activation::Softplus)
        .quadratic(Quadratic::Full)
        .build()
        .unwrap();
    let w: Vec<f64> = (0..arch.weight_len())
        .map(|k| 0.5 * ((k as f64) * 0.7).sin())
        .collect();
    PcfModel::new(arch, WeightVector(w), None).unwrap()
}

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("PCF_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(
        expected == actual,
        "{name} differs from the golden file; rerun with PCF_UPDATE_GOLDEN=1 if intended"
    );
}

#[test]
fn bound_cvxpy_code() {
    let g = to_expr_graph(&fixed_model(), &ExportMode::BoundTheta { theta: vec![0.5] }).unwrap();
    let code = emit_code(&g, &Template::parse(CVXPY_TEMPLATE).unwrap()).unwrap();
    check("bound.py", &code);
}

#[test]
fn symbolic_cvxpy_code() {
    let g = to_expr_graph(&fixed_model(), &ExportMode::SymbolicTheta).unwrap();
    let code = emit_code(&g, &Template::parse(CVXPY_TEMPLATE).unwrap()).unwrap();
    check("symbolic.py", &code);
}

#[test]
fn symbolic_graph_json() {
    let g = to_expr_graph(&fixed_model(), &ExportMode::SymbolicTheta).unwrap();
    check("symbolic_graph.json", &g.to_json());
}

#[test]
fn emission_is_repeatable() {
    let m = fixed_model();
    let t = Template::parse(CVXPY_TEMPLATE).unwrap();
    let a = emit_code(&to_expr_graph(&m, &ExportMode::SymbolicTheta).unwrap(), &t).unwrap();
    let b = emit_code(&to_expr_graph(&m, &ExportMode::SymbolicTheta).unwrap(), &t).unwrap();
    assert_eq!(a, b);
}

//! Model persistence, expression graphs and template-driven code emission.

mod emit;
mod graph;
mod model_file;

pub use emit::{emit_code, Template, CVXPY_TEMPLATE};
pub use graph::{
    to_expr_graph, BlockShape, Curvature, ExportMode, ExprGraph, Node, NodeId, PsiLayerSpec,
    PsiSpec,
};
pub use model_file::{from_json, load_model, save_model, to_json, FORMAT_NAME, FORMAT_VERSION};

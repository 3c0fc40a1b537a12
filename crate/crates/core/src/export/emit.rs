//! Text emission of expression graphs from sectioned templates.
//!
//! A template is a sequence of sections, each introduced by a line
//! `@@<kind>`. Kinds are the node kinds of [`super::Node`] plus the optional
//! `header` and `footer`. Text before the first section is ignored. Within a
//! section, `{{name}}` is replaced by a node field; node references render as
//! `n<index>`.
//!
//! | section | placeholders |
//! |---|---|
//! | every node | `id`, `kind` |
//! | `variable`, `parameter` | `name`, `size` |
//! | `constant` | `rows`, `cols`, `shape`, `values`, `dense` |
//! | `psi_network` | `input`, `network` (compact JSON) |
//! | `param_block` | `source`, `start`, `len`, `rows`, `cols`, `shape`, `nonneg` |
//! | `affine` | `input`, `matrix`, `offset` |
//! | `nonneg_matmul` | `input`, `matrix` |
//! | `relu`, `softplus`, `sum_of_squares` | `input` |
//! | `add` | `inputs` (comma separated), `sum` (joined by ` + `) |
//! | `header`, `footer` | `output`, `n`, `p`, `d`, `mode` |

use std::collections::{BTreeMap, BTreeSet};

use super::graph::{ExportMode, ExprGraph, Node, NodeId};
use crate::error::{PcfError, Result};

/// Template for Python source building a CVXPY expression.
pub const CVXPY_TEMPLATE: &str = include_str!("../../templates/cvxpy.tmpl");

const NODE_KINDS: &[&str] = &[
    "variable",
    "parameter",
    "constant",
    "psi_network",
    "param_block",
    "affine",
    "nonneg_matmul",
    "relu",
    "softplus",
    "sum_of_squares",
    "add",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    sections: BTreeMap<String, String>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Template> {
        let mut sections = BTreeMap::new();
        let mut current: Option<(String, String)> = None;
        for line in text.split_inclusive('\n') {
            if let Some(rest) = line.strip_prefix("@@") {
                if let Some((k, body)) = current.take() {
                    sections.insert(k, body);
                }
                let kind = rest.trim().to_string();
                if kind != "header" && kind != "footer" && !NODE_KINDS.contains(&kind.as_str()) {
                    return Err(PcfError::Template(format!("unknown section @@{kind}")));
                }
                if sections.contains_key(&kind) {
                    return Err(PcfError::Template(format!("duplicate section @@{kind}")));
                }
                current = Some((kind, String::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
            }
        }
        if let Some((k, body)) = current {
            sections.insert(k, body);
        }
        Ok(Template { sections })
    }

    pub fn has(&self, kind: &str) -> bool {
        self.sections.contains_key(kind)
    }
}

fn list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| crate::data::format_f64(*v)).collect();
    format!("[{}]", items.join(", "))
}

fn id(k: NodeId) -> String {
    format!("n{k}")
}

fn render(section: &str, body: &str, vars: &[(&str, String)]) -> Result<String> {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PcfError::Template(format!("unclosed placeholder in @@{section}")))?;
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| {
                PcfError::Template(format!("unknown placeholder {{{{{name}}}}} in @@{section}"))
            })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn node_vars(k: NodeId, node: &Node) -> Vec<(&'static str, String)> {
    let mut v = vec![("id", id(k)), ("kind", node.kind().to_string())];
    match node {
        Node::Variable { name, size } | Node::Parameter { name, size } => {
            v.push(("name", name.clone()));
            v.push(("size", size.to_string()));
        }
        Node::Constant {
            rows,
            cols,
            shape,
            values,
        } => {
            v.push(("rows", rows.to_string()));
            v.push(("cols", cols.to_string()));
            v.push((
                "shape",
                serde_json::to_value(shape)
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string(),
            ));
            v.push(("values", list(values)));
            v.push(("dense", list(&shape.dense(*rows, *cols, values))));
        }
        Node::PsiNetwork { input, network } => {
            v.push(("input", id(*input)));
            v.push((
                "network",
                serde_json::to_string(network).expect("psi spec serializes"),
            ));
        }
        Node::ParamBlock {
            source,
            start,
            rows,
            cols,
            shape,
            nonneg,
        } => {
            v.push(("source", id(*source)));
            v.push(("start", start.to_string()));
            v.push(("len", shape.packed_len(*rows, *cols).to_string()));
            v.push(("rows", rows.to_string()));
            v.push(("cols", cols.to_string()));
            v.push((
                "shape",
                serde_json::to_value(shape)
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string(),
            ));
            v.push(("nonneg", nonneg.to_string()));
        }
        Node::Affine {
            input,
            matrix,
            offset,
        } => {
            v.push(("input", id(*input)));
            v.push(("matrix", id(*matrix)));
            v.push(("offset", id(*offset)));
        }
        Node::NonnegMatmul { input, matrix } => {
            v.push(("input", id(*input)));
            v.push(("matrix", id(*matrix)));
        }
        Node::Relu { input } | Node::Softplus { input } | Node::SumOfSquares { input } => {
            v.push(("input", id(*input)));
        }
        Node::Add { inputs } => {
            let ids: Vec<String> = inputs.iter().map(|i| id(*i)).collect();
            v.push(("inputs", ids.join(", ")));
            v.push(("sum", ids.join(" + ")));
        }
    }
    v
}

/// Renders `graph` node by node in topological order. Fails with the list of
/// node kinds the template lacks.
pub fn emit_code(graph: &ExprGraph, template: &Template) -> Result<String> {
    let missing: BTreeSet<String> = graph
        .nodes
        .iter()
        .map(|n| n.kind())
        .filter(|k| !template.has(k))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(PcfError::MissingTemplateKinds(
            missing.into_iter().collect(),
        ));
    }
    let mode = match graph.mode {
        ExportMode::SymbolicTheta => "symbolic_theta",
        ExportMode::BoundTheta { .. } => "bound_theta",
    };
    let frame = [
        ("output", id(graph.output)),
        ("n", graph.n.to_string()),
        ("p", graph.p.to_string()),
        ("d", graph.d.to_string()),
        ("mode", mode.to_string()),
    ];
    let mut out = String::new();
    if let Some(h) = template.sections.get("header") {
        out.push_str(&render("header", h, &frame)?);
    }
    for (k, node) in graph.nodes.iter().enumerate() {
        let body = &template.sections[node.kind()];
        out.push_str(&render(node.kind(), body, &node_vars(k, node))?);
    }
    if let Some(f) = template.sections.get("footer") {
        out.push_str(&render("footer", f, &frame)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Activation, Architecture};
    use crate::export::to_expr_graph;
    use crate::model::PcfModel;
    use crate::psi::WeightVector;

    fn constant_graph() -> ExprGraph {
        let arch = Architecture::builder(1, 1, 1)
            .activation(Activation::Softplus)
            .build()
            .unwrap();
        let m = PcfModel::new(arch.clone(), WeightVector::zeros(&arch), None).unwrap();
        to_expr_graph(&m, &ExportMode::BoundTheta { theta: vec![0.0] }).unwrap()
    }

    #[test]
    fn minimal_template_renders_one_affine_snippet() {
        let t = Template::parse("@@variable\n@@constant\n@@affine\nAFFINE {{id}}\n").unwrap();
        let out = emit_code(&constant_graph(), &t).unwrap();
        assert_eq!(out.matches("AFFINE").count(), 1);
        assert_eq!(out.lines().count(), 1);
    }

    #[test]
    fn missing_kinds_are_listed() {
        let t = Template::parse("@@affine\nx\n").unwrap();
        match emit_code(&constant_graph(), &t) {
            Err(PcfError::MissingTemplateKinds(k)) => assert_eq!(k, vec!["constant", "variable"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn template_errors() {
        assert!(matches!(
            Template::parse("@@bogus\n"),
            Err(PcfError::Template(_))
        ));
        let t = Template::parse("@@variable\n{{nope}}\n@@constant\n@@affine\n").unwrap();
        assert!(matches!(
            emit_code(&constant_graph(), &t),
            Err(PcfError::Template(_))
        ));
    }

    #[test]
    fn shipped_template_covers_every_kind() {
        let t = Template::parse(CVXPY_TEMPLATE).unwrap();
        for k in NODE_KINDS {
            assert!(t.has(k), "{k}");
        }
    }
}

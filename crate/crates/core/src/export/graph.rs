//! Expression graphs of fitted models built from convexity-preserving atoms.
//!
//! Nodes are stored in topological order; every node refers only to earlier
//! nodes. Matrix-valued nodes (`constant`, `param_block`) hold packed values
//! interpreted through their [`BlockShape`].

use serde::{Deserialize, Serialize};

use crate::arch::{softplus, Activation, Head, QuadLayout};
use crate::error::{check_finite, check_len, PcfError, Result};
use crate::model::PcfModel;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockShape {
    /// Column vector of `rows` entries.
    Vector,
    /// `rows x cols`, row-major.
    Dense,
    /// Square, upper triangle stored row by row.
    UpperTriangular,
    /// Square, diagonal entries only.
    Diagonal,
}

impl BlockShape {
    pub fn packed_len(self, rows: usize, cols: usize) -> usize {
        match self {
            BlockShape::Vector => rows,
            BlockShape::Dense => rows * cols,
            BlockShape::UpperTriangular => rows * (rows + 1) / 2,
            BlockShape::Diagonal => rows,
        }
    }

    /// Dense row-major expansion of packed values.
    pub fn dense(self, rows: usize, cols: usize, packed: &[f64]) -> Vec<f64> {
        match self {
            BlockShape::Vector | BlockShape::Dense => packed.to_vec(),
            BlockShape::UpperTriangular => {
                let mut out = vec![0.0; rows * cols];
                let mut k = 0;
                for i in 0..rows {
                    for j in i..cols {
                        out[i * cols + j] = packed[k];
                        k += 1;
                    }
                }
                out
            }
            BlockShape::Diagonal => {
                let mut out = vec![0.0; rows * cols];
                for (i, v) in packed.iter().enumerate() {
                    out[i * cols + i] = *v;
                }
                out
            }
        }
    }

    /// `M v + offset`, each row accumulated left to right starting from its
    /// offset entry.
    fn matvec(
        self,
        rows: usize,
        cols: usize,
        packed: &[f64],
        v: &[f64],
        offset: Option<&[f64]>,
    ) -> Vec<f64> {
        let start = |i: usize| offset.map_or(0.0, |o| o[i]);
        match self {
            BlockShape::Vector => (0..rows)
                .map(|i| start(i) + packed[i] * v.first().copied().unwrap_or(0.0))
                .collect(),
            BlockShape::Dense => (0..rows)
                .map(|i| {
                    let mut acc = start(i);
                    for (a, b) in packed[i * cols..(i + 1) * cols].iter().zip(v) {
                        acc += a * b;
                    }
                    acc
                })
                .collect(),
            BlockShape::UpperTriangular => {
                let mut k = 0;
                (0..rows)
                    .map(|i| {
                        let mut acc = start(i);
                        for vj in &v[i..cols] {
                            acc += packed[k] * vj;
                            k += 1;
                        }
                        acc
                    })
                    .collect()
            }
            BlockShape::Diagonal => (0..rows).map(|i| start(i) + packed[i] * v[i]).collect(),
        }
    }
}

/// One dense layer of the parameter network: `A h + B theta + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiLayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    /// Hidden-layer activation; absent on the output layer.
    pub activation: Option<Activation>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Self-contained description of psi, evaluated outside the convex ruleset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub theta_size: usize,
    pub layers: Vec<PsiLayerSpec>,
    /// Output map applied to each emitted entry.
    pub heads: Vec<Head>,
}

impl PsiSpec {
    fn from_model(model: &PcfModel) -> Self {
        let w = model.weights.as_slice();
        let psi = model.arch.psi_layout();
        let last = psi.layers.len() - 1;
        let layers = psi
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| PsiLayerSpec {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: (j < last).then_some(model.arch.psi_activation),
                a: w[l.a_offset..l.b_offset].to_vec(),
                b: w[l.b_offset..l.c_offset].to_vec(),
                c: w[l.c_offset..l.c_offset + l.outputs].to_vec(),
            })
            .collect();
        PsiSpec {
            theta_size: psi.p,
            layers,
            heads: model.arch.layout().heads.clone(),
        }
    }

    pub fn output_len(&self) -> usize {
        self.heads.len()
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = Vec::new();
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            for i in 0..layer.outputs {
                let mut acc = layer.c[i];
                for (a, hv) in layer.a[i * layer.inputs..(i + 1) * layer.inputs]
                    .iter()
                    .zip(&h)
                {
                    acc += a * hv;
                }
                let p = self.theta_size;
                for (b, t) in layer.b[i * p..(i + 1) * p].iter().zip(theta) {
                    acc += b * t;
                }
                out.push(match layer.activation {
                    Some(act) => act.apply(acc),
                    None => self.heads[i].apply(acc),
                });
            }
            h = out;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    Variable {
        name: String,
        size: usize,
    },
    Parameter {
        name: String,
        size: usize,
    },
    Constant {
        rows: usize,
        cols: usize,
        shape: BlockShape,
        values: Vec<f64>,
    },
    /// The parameter network; recompute whenever the parameter changes.
    PsiNetwork {
        input: NodeId,
        network: PsiSpec,
    },
    /// A block of the psi output. `nonneg` marks blocks produced by `phi_W`.
    ParamBlock {
        source: NodeId,
        start: usize,
        rows: usize,
        cols: usize,
        shape: BlockShape,
        nonneg: bool,
    },
    /// `matrix @ input + offset`.
    Affine {
        input: NodeId,
        matrix: NodeId,
        offset: NodeId,
    },
    /// `matrix @ input` with an elementwise nonnegative matrix.
    NonnegMatmul {
        input: NodeId,
        matrix: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Softplus {
        input: NodeId,
    },
    /// Scalar `sum_i input_i^2`.
    SumOfSquares {
        input: NodeId,
    },
    /// Elementwise sum; scalar operands broadcast.
    Add {
        inputs: Vec<NodeId>,
    },
}

impl Node {
    pub fn kind(&self) -> &'static str {
        match self {
            Node::Variable { .. } => "variable",
            Node::Parameter { .. } => "parameter",
            Node::Constant { .. } => "constant",
            Node::PsiNetwork { .. } => "psi_network",
            Node::ParamBlock { .. } => "param_block",
            Node::Affine { .. } => "affine",
            Node::NonnegMatmul { .. } => "nonneg_matmul",
            Node::Relu { .. } => "relu",
            Node::Softplus { .. } => "softplus",
            Node::SumOfSquares { .. } => "sum_of_squares",
            Node::Add { .. } => "add",
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Node::Variable { .. } | Node::Parameter { .. } | Node::Constant { .. } => Vec::new(),
            Node::PsiNetwork { input, .. }
            | Node::Relu { input }
            | Node::Softplus { input }
            | Node::SumOfSquares { input } => vec![*input],
            Node::ParamBlock { source, .. } => vec![*source],
            Node::Affine {
                input,
                matrix,
                offset,
            } => vec![*input, *matrix, *offset],
            Node::NonnegMatmul { input, matrix } => vec![*input, *matrix],
            Node::Add { inputs } => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExportMode {
    /// psi is kept as a preamble over a `theta` parameter node.
    SymbolicTheta,
    /// Weights are materialized for this `theta` (original units).
    BoundTheta { theta: Vec<f64> },
}

/// Curvature of a node as a function of the variable `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Constant,
    Affine,
    Convex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprGraph {
    pub mode: ExportMode,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub nodes: Vec<Node>,
    /// Node whose value is the length-`d` output.
    pub output: NodeId,
}

enum Val {
    Const(Vec<f64>),
    Node(NodeId),
}

struct Builder {
    nodes: Vec<Node>,
    fold: bool,
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|a| *a == 0.0)
}

/// Source of a matrix operand: literal values or a psi output block.
enum Mat<'a> {
    Lit {
        rows: usize,
        cols: usize,
        shape: BlockShape,
        values: &'a [f64],
    },
    Block(NodeId),
}

impl Builder {
    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn vector(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Node::Constant {
            rows: values.len(),
            cols: 1,
            shape: BlockShape::Vector,
            values,
        })
    }

    fn matrix(&mut self, m: &Mat<'_>) -> NodeId {
        match *m {
            Mat::Lit {
                rows,
                cols,
                shape,
                values,
            } => self.push(Node::Constant {
                rows,
                cols,
                shape,
                values: values.to_vec(),
            }),
            Mat::Block(id) => id,
        }
    }

    fn node_of(&mut self, v: Val) -> NodeId {
        match v {
            Val::Node(id) => id,
            Val::Const(c) => self.vector(c),
        }
    }

    /// `m @ input + offset`.
    fn affine(&mut self, m: Mat<'_>, input: &Val, offset: Mat<'_>) -> Val {
        if self.fold {
            if let (
                Mat::Lit {
                    rows,
                    cols,
                    shape,
                    values,
                },
                Mat::Lit { values: off, .. },
            ) = (&m, &offset)
            {
                if all_zero(values) {
                    return Val::Const(off.to_vec());
                }
                if let Val::Const(c) = input {
                    return Val::Const(shape.matvec(*rows, *cols, values, c, Some(off)));
                }
            }
        }
        let input = match input {
            Val::Node(id) => *id,
            Val::Const(c) => self.vector(c.clone()),
        };
        let matrix = self.matrix(&m);
        let offset = self.matrix(&offset);
        Val::Node(self.push(Node::Affine {
            input,
            matrix,
            offset,
        }))
    }

    /// `w @ input`, or `None` when `w` is a literal zero.
    fn nonneg_matmul(&mut self, w: Mat<'_>, input: Val) -> Option<Val> {
        if self.fold {
            if let Mat::Lit {
                rows,
                cols,
                shape,
                values,
            } = &w
            {
                if all_zero(values) {
                    return None;
                }
                if let Val::Const(c) = &input {
                    return Some(Val::Const(shape.matvec(*rows, *cols, values, c, None)));
                }
            }
        }
        let input = self.node_of(input);
        let matrix = self.matrix(&w);
        Some(Val::Node(self.push(Node::NonnegMatmul { input, matrix })))
    }

    fn activation(&mut self, act: Activation, v: Val) -> Val {
        match v {
            Val::Const(c) if self.fold => Val::Const(c.into_iter().map(|a| act.apply(a)).collect()),
            v => {
                let input = self.node_of(v);
                Val::Node(self.push(match act {
                    Activation::Relu => Node::Relu { input },
                    Activation::Softplus => Node::Softplus { input },
                }))
            }
        }
    }

    fn sum_of_squares(&mut self, m: Mat<'_>, xs: &Val) -> Option<Val> {
        let rows = match &m {
            Mat::Lit { rows, values, .. } => {
                if self.fold && all_zero(values) {
                    return None;
                }
                *rows
            }
            Mat::Block(_) => self.rows_of(&m),
        };
        let zero = vec![0.0; rows];
        let inner = self.affine(
            m,
            xs,
            Mat::Lit {
                rows,
                cols: 1,
                shape: BlockShape::Vector,
                values: &zero,
            },
        );
        Some(match inner {
            Val::Const(c) => Val::Const(vec![c.iter().map(|v| v * v).sum()]),
            Val::Node(input) => Val::Node(self.push(Node::SumOfSquares { input })),
        })
    }

    fn rows_of(&self, m: &Mat<'_>) -> usize {
        match m {
            Mat::Lit { rows, .. } => *rows,
            Mat::Block(id) => match &self.nodes[*id] {
                Node::ParamBlock { rows, .. } => *rows,
                _ => unreachable!("matrix operands are param blocks"),
            },
        }
    }

    /// Sum of terms of length `size` (scalars broadcast).
    fn add(&mut self, terms: Vec<Val>, size: usize) -> Val {
        let mut konst: Option<Vec<f64>> = None;
        let mut nodes = Vec::new();
        for t in terms {
            match t {
                Val::Const(c) if self.fold => {
                    let acc = konst.get_or_insert_with(|| vec![0.0; size]);
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += if c.len() == 1 { c[0] } else { c[i] };
                    }
                }
                Val::Const(c) => nodes.push(self.vector(c)),
                Val::Node(id) => nodes.push(id),
            }
        }
        if nodes.is_empty() {
            return Val::Const(konst.unwrap_or_else(|| vec![0.0; size]));
        }
        if let Some(c) = konst {
            if !all_zero(&c) {
                nodes.push(self.vector(c));
            }
        }
        if nodes.len() == 1 {
            Val::Node(nodes[0])
        } else {
            Val::Node(self.push(Node::Add { inputs: nodes }))
        }
    }
}

struct BlockSource<'a> {
    literal: Option<&'a [f64]>,
    psi: Option<NodeId>,
    heads: &'a [Head],
}

impl<'a> BlockSource<'a> {
    fn block(
        &self,
        b: &mut Builder,
        start: usize,
        rows: usize,
        cols: usize,
        shape: BlockShape,
    ) -> Mat<'a> {
        let len = shape.packed_len(rows, cols);
        match (self.literal, self.psi) {
            (Some(vals), _) => Mat::Lit {
                rows,
                cols,
                shape,
                values: &vals[start..start + len],
            },
            (None, Some(source)) => Mat::Block(
                b.push(Node::ParamBlock {
                    source,
                    start,
                    rows,
                    cols,
                    shape,
                    nonneg: len > 0
                        && self.heads[start..start + len]
                            .iter()
                            .all(|h| *h == Head::Nonneg),
                }),
            ),
            (None, None) => unreachable!("either literal values or a psi node"),
        }
    }
}

fn diag_map(mean: &[f64], scale: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
    let off: Vec<f64> = mean.iter().zip(scale).map(|(m, s)| -m / s).collect();
    (inv, off)
}

/// Builds the expression graph of `model`. In bound mode constant
/// subexpressions are folded, so a model that ignores `x` becomes a single
/// affine node with a zero matrix.
pub fn to_expr_graph(model: &PcfModel, mode: &ExportMode) -> Result<ExprGraph> {
    let arch = &model.arch;
    check_finite("weights", model.weights.as_slice())?;
    let lay = arch.layout();
    let (n, p, d) = (arch.n, arch.p, arch.d);
    let mut b = Builder {
        nodes: Vec::new(),
        fold: matches!(mode, ExportMode::BoundTheta { .. }),
    };
    let x = b.push(Node::Variable {
        name: "x".into(),
        size: n,
    });
    let xs = match &model.scaling {
        Some(s) => {
            let (inv, off) = diag_map(&s.x_mean, &s.x_scale);
            b.affine(
                Mat::Lit {
                    rows: n,
                    cols: n,
                    shape: BlockShape::Diagonal,
                    values: &inv,
                },
                &Val::Node(x),
                Mat::Lit {
                    rows: n,
                    cols: 1,
                    shape: BlockShape::Vector,
                    values: &off,
                },
            )
        }
        None => Val::Node(x),
    };

    // Either literal blocks for a fixed theta or param blocks over psi.
    let literal;
    let mut psi_node = None;
    match mode {
        ExportMode::BoundTheta { theta } => {
            check_len("theta", p, theta.len())?;
            check_finite("theta", theta)?;
            literal = Some(model.materialize(theta)?.into_flat());
        }
        ExportMode::SymbolicTheta => {
            literal = None;
            let th = b.push(Node::Parameter {
                name: "theta".into(),
                size: p,
            });
            let ths = match &model.scaling {
                Some(s) => {
                    let (inv, off) = diag_map(&s.theta_mean, &s.theta_scale);
                    let m = b.push(Node::Constant {
                        rows: p,
                        cols: p,
                        shape: BlockShape::Diagonal,
                        values: inv,
                    });
                    let o = b.vector(off);
                    b.push(Node::Affine {
                        input: th,
                        matrix: m,
                        offset: o,
                    })
                }
                None => th,
            };
            psi_node = Some(b.push(Node::PsiNetwork {
                input: ths,
                network: PsiSpec::from_model(model),
            }));
        }
    }
    let src = BlockSource {
        literal: literal.as_deref(),
        psi: psi_node,
        heads: &lay.heads,
    };
    let block = |b: &mut Builder, start, rows, cols, shape| src.block(b, start, rows, cols, shape);

    let num = lay.num_layers();
    let mut z: Option<Val> = None;
    for l in 1..=num {
        let rows = lay.width(l);
        let mut terms = Vec::new();
        let v = block(&mut b, lay.v_offset(l), rows, n, BlockShape::Dense);
        let bias = block(&mut b, lay.bias_offset(l), rows, 1, BlockShape::Vector);
        terms.push(b.affine(v, &xs, bias));
        if l >= 2 {
            let w = block(
                &mut b,
                lay.w_offset(l),
                rows,
                lay.width(l - 1),
                BlockShape::Dense,
            );
            let prev = z.take().expect("previous layer");
            if let Some(t) = b.nonneg_matmul(w, prev) {
                terms.push(t);
            }
        }
        if l == num {
            match lay.quad {
                QuadLayout::None => {}
                QuadLayout::Full { offset } => {
                    let u = block(&mut b, offset, n, n, BlockShape::UpperTriangular);
                    terms.extend(b.sum_of_squares(u, &xs));
                }
                QuadLayout::LowRank {
                    rank,
                    f_offset,
                    diag_offset,
                } => {
                    let f = block(&mut b, f_offset, rank, n, BlockShape::Dense);
                    let mut quad: Vec<Val> = b.sum_of_squares(f, &xs).into_iter().collect();
                    let dg = block(&mut b, diag_offset, n, n, BlockShape::Diagonal);
                    quad.extend(b.sum_of_squares(dg, &xs));
                    if !quad.is_empty() {
                        terms.push(b.add(quad, 1));
                    }
                }
            }
        }
        let a = b.add(terms, rows);
        z = Some(if l < num {
            b.activation(arch.activation, a)
        } else {
            a
        });
    }
    let mut out = z.expect("at least one layer");
    if let Some(s) = &model.scaling {
        out = b.affine(
            Mat::Lit {
                rows: d,
                cols: d,
                shape: BlockShape::Diagonal,
                values: &s.y_scale,
            },
            &out,
            Mat::Lit {
                rows: d,
                cols: 1,
                shape: BlockShape::Vector,
                values: &s.y_mean,
            },
        );
    }
    let output = match out {
        Val::Node(id) => id,
        Val::Const(c) => {
            let zero = vec![0.0; d * n];
            let mut nofold = Builder {
                nodes: std::mem::take(&mut b.nodes),
                fold: false,
            };
            let id = nofold.affine(
                Mat::Lit {
                    rows: d,
                    cols: n,
                    shape: BlockShape::Dense,
                    values: &zero,
                },
                &Val::Node(x),
                Mat::Lit {
                    rows: d,
                    cols: 1,
                    shape: BlockShape::Vector,
                    values: &c,
                },
            );
            b.nodes = nofold.nodes;
            match id {
                Val::Node(id) => id,
                Val::Const(_) => unreachable!(),
            }
        }
    };
    // drop constants orphaned by folding
    let graph = ExprGraph {
        mode: mode.clone(),
        n,
        p,
        d,
        nodes: b.nodes,
        output,
    };
    Ok(graph.pruned())
}

impl ExprGraph {
    /// Copy without nodes unreachable from the output (the variable and
    /// parameter nodes are always kept).
    fn pruned(self) -> ExprGraph {
        let mut keep = vec![false; self.nodes.len()];
        keep[self.output] = true;
        for i in (0..self.nodes.len()).rev() {
            if keep[i] {
                for j in self.nodes[i].operands() {
                    keep[j] = true;
                }
            }
            if matches!(
                self.nodes[i],
                Node::Variable { .. } | Node::Parameter { .. }
            ) {
                keep[i] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if !keep[i] {
                continue;
            }
            remap[i] = nodes.len();
            let r = |id: NodeId| remap[id];
            nodes.push(match node {
                Node::PsiNetwork { input, network } => Node::PsiNetwork {
                    input: r(input),
                    network,
                },
                Node::ParamBlock {
                    source,
                    start,
                    rows,
                    cols,
                    shape,
                    nonneg,
                } => Node::ParamBlock {
                    source: r(source),
                    start,
                    rows,
                    cols,
                    shape,
                    nonneg,
                },
                Node::Affine {
                    input,
                    matrix,
                    offset,
                } => Node::Affine {
                    input: r(input),
                    matrix: r(matrix),
                    offset: r(offset),
                },
                Node::NonnegMatmul { input, matrix } => Node::NonnegMatmul {
                    input: r(input),
                    matrix: r(matrix),
                },
                Node::Relu { input } => Node::Relu { input: r(input) },
                Node::Softplus { input } => Node::Softplus { input: r(input) },
                Node::SumOfSquares { input } => Node::SumOfSquares { input: r(input) },
                Node::Add { inputs } => Node::Add {
                    inputs: inputs.into_iter().map(r).collect(),
                },
                leaf => leaf,
            });
        }
        ExprGraph {
            output: remap[self.output],
            nodes,
            ..self
        }
    }

    fn matrix_meta(&self, id: NodeId) -> Result<(usize, usize, BlockShape)> {
        match &self.nodes[id] {
            Node::Constant {
                rows, cols, shape, ..
            }
            | Node::ParamBlock {
                rows, cols, shape, ..
            } => Ok((*rows, *cols, *shape)),
            other => Err(PcfError::InvalidInput(format!(
                "node {id} ({}) used as a matrix",
                other.kind()
            ))),
        }
    }

    /// Value of every node. `theta` is required in symbolic mode and ignored
    /// in bound mode.
    pub fn eval_all(&self, x: &[f64], theta: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        check_len("x", self.n, x.len())?;
        check_finite("x", x)?;
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node {
                Node::Variable { .. } => x.to_vec(),
                Node::Parameter { size, .. } => {
                    let th = theta.ok_or_else(|| {
                        PcfError::InvalidInput("symbolic graph needs a theta value".into())
                    })?;
                    check_len("theta", *size, th.len())?;
                    check_finite("theta", th)?;
                    th.to_vec()
                }
                Node::Constant { values, .. } => values.clone(),
                Node::PsiNetwork { input, network } => network.eval(&vals[*input]),
                Node::ParamBlock {
                    source,
                    start,
                    rows,
                    cols,
                    shape,
                    ..
                } => vals[*source][*start..*start + shape.packed_len(*rows, *cols)].to_vec(),
                Node::Affine {
                    input,
                    matrix,
                    offset,
                } => {
                    let (r, c, s) = self.matrix_meta(*matrix)?;
                    s.matvec(r, c, &vals[*matrix], &vals[*input], Some(&vals[*offset]))
                }
                Node::NonnegMatmul { input, matrix } => {
                    let (r, c, s) = self.matrix_meta(*matrix)?;
                    s.matvec(r, c, &vals[*matrix], &vals[*input], None)
                }
                Node::Relu { input } => vals[*input].iter().map(|a| a.max(0.0)).collect(),
                Node::Softplus { input } => vals[*input].iter().map(|a| softplus(*a)).collect(),
                Node::SumOfSquares { input } => vec![vals[*input].iter().map(|a| a * a).sum()],
                Node::Add { inputs } => {
                    let size = inputs.iter().map(|i| vals[*i].len()).max().unwrap_or(0);
                    let mut acc = vec![0.0; size];
                    for i in inputs {
                        let v = &vals[*i];
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += if v.len() == 1 { v[0] } else { v[k] };
                        }
                    }
                    acc
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    pub fn eval(&self, x: &[f64], theta: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut all = self.eval_all(x, theta)?;
        Ok(all.swap_remove(self.output))
    }

    /// Checks the composition rules bottom-up and returns the curvature of
    /// the output in `x`. Nonnegativity of `nonneg_matmul` matrices is checked
    /// on literal values, or structurally for psi blocks (every entry must
    /// come from a `phi_W` head).
    pub fn certify(&self) -> Result<Curvature> {
        let fail = |msg: String| Err(PcfError::NotCertified(msg));
        let mut curv: Vec<Curvature> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let c = match node {
                Node::Variable { .. } => Curvature::Affine,
                Node::Parameter { .. } | Node::Constant { .. } => Curvature::Constant,
                Node::PsiNetwork { input, .. } => {
                    if curv[*input] != Curvature::Constant {
                        return fail(format!("psi network {id} depends on x"));
                    }
                    Curvature::Constant
                }
                Node::ParamBlock { source, .. } => {
                    if !matches!(self.nodes[*source], Node::PsiNetwork { .. }) {
                        return fail(format!("param block {id} does not read a psi network"));
                    }
                    Curvature::Constant
                }
                Node::Affine {
                    input,
                    matrix,
                    offset,
                } => {
                    if curv[*matrix] != Curvature::Constant || curv[*offset] != Curvature::Constant
                    {
                        return fail(format!("affine node {id} has an x-dependent coefficient"));
                    }
                    match curv[*input] {
                        Curvature::Convex => {
                            if !self.certified_nonneg(*matrix) {
                                return fail(format!(
                                    "affine node {id} maps a convex input through a matrix not certified nonnegative"
                                ));
                            }
                            Curvature::Convex
                        }
                        c => c,
                    }
                }
                Node::NonnegMatmul { input, matrix } => {
                    if curv[*matrix] != Curvature::Constant || !self.certified_nonneg(*matrix) {
                        return fail(format!("nonneg_matmul node {id} has an uncertified matrix"));
                    }
                    curv[*input]
                }
                Node::Relu { input } | Node::Softplus { input } => match curv[*input] {
                    Curvature::Constant => Curvature::Constant,
                    _ => Curvature::Convex,
                },
                Node::SumOfSquares { input } => match curv[*input] {
                    Curvature::Constant => Curvature::Constant,
                    Curvature::Affine => Curvature::Convex,
                    Curvature::Convex => {
                        return fail(format!("sum_of_squares node {id} of a convex input"))
                    }
                },
                Node::Add { inputs } => inputs
                    .iter()
                    .map(|i| curv[*i])
                    .max()
                    .unwrap_or(Curvature::Constant),
            };
            curv.push(c);
        }
        Ok(curv[self.output])
    }

    fn certified_nonneg(&self, id: NodeId) -> bool {
        match &self.nodes[id] {
            Node::Constant { values, .. } => values.iter().all(|v| *v >= 0.0),
            Node::ParamBlock {
                source,
                start,
                rows,
                cols,
                shape,
                ..
            } => match &self.nodes[*source] {
                Node::PsiNetwork { network, .. } => {
                    let len = shape.packed_len(*rows, *cols);
                    network.heads[*start..*start + len]
                        .iter()
                        .all(|h| *h == Head::Nonneg)
                }
                _ => false,
            },
            _ => false,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ExprGraph> {
        serde_json::from_str(text)
            .map_err(|e| PcfError::InvalidInput(format!("expression graph: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Architecture, Monotonicity, Quadratic};
    use crate::psi::WeightVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_model(c: f64) -> PcfModel {
        let arch = Architecture::builder(2, 1, 1)
            .activation(Activation::Softplus)
            .build()
            .unwrap();
        let mut w = WeightVector::zeros(&arch);
        let psi = arch.psi_layout();
        let last = psi.layers.last().unwrap();
        let off = last.c_offset + arch.layout().bias_offset(arch.num_layers());
        w.0[off] = c;
        PcfModel::new(arch, w, None).unwrap()
    }

    #[test]
    fn constant_model_folds_to_one_affine_node() {
        let m = constant_model(1.25);
        let g = to_expr_graph(&m, &ExportMode::BoundTheta { theta: vec![0.3] }).unwrap();
        let ops: Vec<&str> = g
            .nodes
            .iter()
            .map(Node::kind)
            .filter(|k| *k != "variable" && *k != "constant")
            .collect();
        assert_eq!(ops, vec!["affine"]);
        match &g.nodes[g.output] {
            Node::Affine { offset, .. } => match &g.nodes[*offset] {
                Node::Constant { values, .. } => assert_eq!(values, &vec![1.25]),
                _ => panic!(),
            },
            _ => panic!(),
        }
        assert_eq!(g.eval(&[4.0, -1.0], None).unwrap(), vec![1.25]);
    }

    #[test]
    fn quadratic_term_is_a_sum_of_squares() {
        let arch = Architecture::builder(2, 0, 1)
            .quadratic(Quadratic::Full)
            .build()
            .unwrap();
        let mut layers = vec![0.0; arch.emitted_len()];
        let QuadLayout::Full { offset } = arch.layout().quad else {
            unreachable!()
        };
        // U = [[1, 2], [0, 3]]
        layers[offset..offset + 3].copy_from_slice(&[1.0, 2.0, 3.0]);
        // psi with p = 0 is a constant: set its offsets to the emitted values
        let mut w = WeightVector::zeros(&arch);
        let c = arch.psi_layout().layers[0].c_offset;
        w.0[c..c + layers.len()].copy_from_slice(&layers);
        let m = PcfModel::new(arch, w, None).unwrap();
        let g = to_expr_graph(&m, &ExportMode::BoundTheta { theta: vec![] }).unwrap();
        assert!(g.nodes.iter().any(|n| n.kind() == "sum_of_squares"));
        // x = (1, -1): Ux = (-1, -3), squared norm 10
        assert_eq!(g.eval(&[1.0, -1.0], None).unwrap(), vec![10.0]);
        assert_eq!(m.evaluate(&[1.0, -1.0], &[]).unwrap(), vec![10.0]);
    }

    fn random_model(seed: u64, quad: Quadratic, scaled: bool) -> PcfModel {
        let arch = Architecture::builder(3, 2, 2)
            .activation(Activation::Softplus)
            .quadratic(quad)
            .scaling(scaled)
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightVector(
            (0..arch.weight_len())
                .map(|_| rng.gen_range(-0.8..0.8))
                .collect(),
        );
        let scaling = scaled.then(|| crate::model::Scaling {
            x_mean: vec![0.5, -1.0, 2.0],
            x_scale: vec![2.0, 0.5, 3.0],
            theta_mean: vec![1.0, 0.0],
            theta_scale: vec![0.25, 4.0],
            y_mean: vec![-3.0, 7.0],
            y_scale: vec![10.0, 0.1],
        });
        PcfModel::new(arch, w, scaling).unwrap()
    }

    #[test]
    fn both_modes_match_native_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (seed, quad, scaled) in [
            (1, Quadratic::None, false),
            (2, Quadratic::Full, true),
            (3, Quadratic::LowRank(2), true),
        ] {
            let m = random_model(seed, quad, scaled);
            let sym = to_expr_graph(&m, &ExportMode::SymbolicTheta).unwrap();
            assert_eq!(sym.certify().unwrap(), Curvature::Convex);
            for _ in 0..50 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let th: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let native = m.evaluate(&x, &th).unwrap();
                let bound =
                    to_expr_graph(&m, &ExportMode::BoundTheta { theta: th.clone() }).unwrap();
                assert!(bound.certify().unwrap() <= Curvature::Convex);
                for (g, want) in [
                    bound.eval(&x, None).unwrap(),
                    sym.eval(&x, Some(&th)).unwrap(),
                ]
                .iter()
                .zip([&native, &native])
                {
                    for (a, b) in g.iter().zip(want.iter()) {
                        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = random_model(5, Quadratic::Full, true);
        let g = to_expr_graph(&m, &ExportMode::SymbolicTheta).unwrap();
        let back = ExprGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn certify_rejects_negative_literal_matrix() {
        let m = random_model(6, Quadratic::None, false);
        let mut g = to_expr_graph(
            &m,
            &ExportMode::BoundTheta {
                theta: vec![0.1, 0.2],
            },
        )
        .unwrap();
        let target = g
            .nodes
            .iter()
            .find_map(|n| match n {
                Node::NonnegMatmul { matrix, .. } => Some(*matrix),
                _ => None,
            })
            .expect("a nonneg_matmul node");
        if let Node::Constant { values, .. } = &mut g.nodes[target] {
            values[0] = -1.0;
        }
        assert!(matches!(g.certify(), Err(PcfError::NotCertified(_))));
    }

    #[test]
    fn only_phi_w_blocks_are_marked_nonneg() {
        let arch = Architecture::builder(2, 1, 1)
            .monotonicity(vec![Monotonicity::Decreasing, Monotonicity::None])
            .build()
            .unwrap();
        let m = PcfModel::new(arch.clone(), WeightVector::zeros(&arch), None).unwrap();
        let g = to_expr_graph(&m, &ExportMode::SymbolicTheta).unwrap();
        let marked = g
            .nodes
            .iter()
            .filter(|n| matches!(n, Node::ParamBlock { nonneg: true, .. }))
            .count();
        // W^2 and W^3; the V blocks mix decreasing and free columns
        assert_eq!(marked, 2);
        assert_eq!(g.certify().unwrap(), Curvature::Convex);
    }
}

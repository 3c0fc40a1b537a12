//! Structural description of a parametrized convex network.
//!
//! The convex network has layer widths `n_1, .., n_{L-1}` plus the output
//! width `n_L = d`. Its weight blocks are emitted by the parameter network
//! psi as one flat vector with the canonical order
//!
//! ```text
//! [W^2, .., W^L, V^1, .., V^L, w^1, .., w^L, U | (F, diag)]
//! ```
//!
//! with every matrix block stored row-major. `U` is stored as its upper
//! triangle, row by row (`n(n+1)/2` entries).

use serde::{Deserialize, Serialize};

use crate::error::{PcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Softplus => softplus(a),
        }
    }

    /// First derivative; the relu kink uses 0.
    #[inline]
    pub fn deriv(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(a),
        }
    }

    #[inline]
    pub fn second_deriv(self, a: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

#[inline]
pub fn softplus(a: f64) -> f64 {
    (-a.abs()).exp().ln_1p() + a.max(0.0)
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    #[default]
    None,
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadratic {
    #[default]
    None,
    /// `x^T U^T U x` with upper-triangular `U`.
    Full,
    /// `x^T (F^T F + diag(d)^2) x` with `F` of shape `r x n`.
    LowRank(usize),
}

/// What psi applies to each of its outputs before they become layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    /// `phi_W`: relu, no offset after it.
    Nonneg,
    /// `phi_- = -phi_W`.
    Nonpos,
}

impl Head {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Head::Identity => a,
            Head::Nonneg => a.max(0.0),
            Head::Nonpos => -(a.max(0.0)),
        }
    }

    #[inline]
    pub fn deriv(self, a: f64) -> f64 {
        match self {
            Head::Identity => 1.0,
            Head::Nonneg => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Head::Nonpos => {
                if a > 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuadLayout {
    None,
    Full {
        offset: usize,
    },
    LowRank {
        rank: usize,
        f_offset: usize,
        diag_offset: usize,
    },
}

/// Offsets of every block inside the flat psi output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub n: usize,
    /// `sizes[l - 1] = n_l` for `l = 1..=L`.
    pub sizes: Vec<usize>,
    w_offsets: Vec<usize>,
    v_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    pub quad: QuadLayout,
    pub heads: Vec<Head>,
    pub m: usize,
}

impl BlockLayout {
    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    /// Width of layer `l` (1-based); layer 0 is the input.
    #[inline]
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.n
        } else {
            self.sizes[l - 1]
        }
    }

    /// Offset of `W^l`, `l >= 2`.
    #[inline]
    pub fn w_offset(&self, l: usize) -> usize {
        self.w_offsets[l - 2]
    }

    #[inline]
    pub fn v_offset(&self, l: usize) -> usize {
        self.v_offsets[l - 1]
    }

    #[inline]
    pub fn bias_offset(&self, l: usize) -> usize {
        self.bias_offsets[l - 1]
    }

    /// Range of the flat output holding all `W` blocks.
    pub fn w_range(&self) -> std::ops::Range<usize> {
        let end = if self.sizes.len() >= 2 {
            self.v_offsets[0]
        } else {
            0
        };
        0..end
    }

    fn new(n: usize, sizes: &[usize], quad: Quadratic, mono: &[Monotonicity]) -> Self {
        let big_l = sizes.len();
        let mut off = 0;
        let mut w_offsets = Vec::with_capacity(big_l.saturating_sub(1));
        for l in 2..=big_l {
            w_offsets.push(off);
            off += sizes[l - 1] * sizes[l - 2];
        }
        let w_end = off;
        let mut v_offsets = Vec::with_capacity(big_l);
        for &s in sizes {
            v_offsets.push(off);
            off += s * n;
        }
        let v_end = off;
        let mut bias_offsets = Vec::with_capacity(big_l);
        for &s in sizes {
            bias_offsets.push(off);
            off += s;
        }
        let quad = match quad {
            Quadratic::None => QuadLayout::None,
            Quadratic::Full => {
                let q = QuadLayout::Full { offset: off };
                off += n * (n + 1) / 2;
                q
            }
            Quadratic::LowRank(rank) => {
                let f_offset = off;
                off += rank * n;
                let diag_offset = off;
                off += n;
                QuadLayout::LowRank {
                    rank,
                    f_offset,
                    diag_offset,
                }
            }
        };
        let mut heads = vec![Head::Identity; off];
        for h in &mut heads[..w_end] {
            *h = Head::Nonneg;
        }
        for (i, &mo) in mono.iter().enumerate() {
            let head = match mo {
                Monotonicity::None => continue,
                Monotonicity::Increasing => Head::Nonneg,
                Monotonicity::Decreasing => Head::Nonpos,
            };
            for (l, &s) in sizes.iter().enumerate() {
                let base = v_offsets[l];
                for row in 0..s {
                    heads[base + row * n + i] = head;
                }
            }
        }
        debug_assert!(v_end <= off);
        BlockLayout {
            n,
            sizes: sizes.to_vec(),
            w_offsets,
            v_offsets,
            bias_offsets,
            quad,
            heads,
            m: off,
        }
    }
}

/// Offsets of one dense layer of psi: `out = A h_prev + B theta + c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiLayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub a_offset: usize,
    pub b_offset: usize,
    pub c_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiLayout {
    pub p: usize,
    pub layers: Vec<PsiLayerLayout>,
    pub len: usize,
}

impl PsiLayout {
    fn new(p: usize, hidden: &[usize], m: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut off = 0;
        let mut prev = 0;
        for &out in hidden.iter().chain(std::iter::once(&m)) {
            let a_offset = off;
            off += out * prev;
            let b_offset = off;
            off += out * p;
            let c_offset = off;
            off += out;
            layers.push(PsiLayerLayout {
                inputs: prev,
                outputs: out,
                a_offset,
                b_offset,
                c_offset,
            });
            prev = out;
        }
        PsiLayout {
            p,
            layers,
            len: off,
        }
    }

    pub fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.outputs).max().unwrap_or(0)
    }
}

/// Fully resolved architecture. Construct with [`ArchitectureBuilder`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    /// Hidden widths `n_1..n_{L-1}`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub psi_hidden: Vec<usize>,
    pub psi_activation: Activation,
    pub monotonicity: Vec<Monotonicity>,
    pub quadratic: Quadratic,
    pub scaling: bool,
    layout: BlockLayout,
    psi_layout: PsiLayout,
}

impl Architecture {
    pub fn builder(n: usize, p: usize, d: usize) -> ArchitectureBuilder {
        ArchitectureBuilder::new(n, p, d)
    }

    /// Default architecture for the given dimensions.
    pub fn new(n: usize, p: usize, d: usize) -> Result<Self> {
        ArchitectureBuilder::new(n, p, d).build()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() + 1
    }

    /// Number of values psi emits (`m`).
    pub fn emitted_len(&self) -> usize {
        self.layout.m
    }

    /// Number of trainable weights (length of the weight vector).
    pub fn weight_len(&self) -> usize {
        self.psi_layout.len
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn psi_layout(&self) -> &PsiLayout {
        &self.psi_layout
    }

    pub fn max_width(&self) -> usize {
        self.layout.sizes.iter().copied().max().unwrap_or(0)
    }
}

pub fn default_width(n: usize, d: usize) -> usize {
    (2 * ((n + d) / 2)).max(2)
}

#[derive(Debug, Clone, Default)]
pub struct ArchitectureBuilder {
    n: usize,
    p: usize,
    d: usize,
    widths: Option<Vec<usize>>,
    activation: Option<Activation>,
    psi_hidden: Option<Vec<usize>>,
    psi_activation: Option<Activation>,
    monotonicity: Option<Vec<Monotonicity>>,
    quadratic: Quadratic,
    scaling: bool,
}

impl ArchitectureBuilder {
    pub fn new(n: usize, p: usize, d: usize) -> Self {
        ArchitectureBuilder {
            n,
            p,
            d,
            ..Default::default()
        }
    }

    pub fn widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = Some(widths);
        self
    }

    /// Default depth (`L = 3`) with every hidden layer `width` wide.
    pub fn uniform_width(self, width: usize) -> Self {
        self.widths(vec![width; 2])
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = Some(a);
        self
    }

    pub fn psi_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.psi_hidden = Some(hidden);
        self
    }

    pub fn psi_activation(mut self, a: Activation) -> Self {
        self.psi_activation = Some(a);
        self
    }

    pub fn monotonicity(mut self, m: Vec<Monotonicity>) -> Self {
        self.monotonicity = Some(m);
        self
    }

    pub fn quadratic(mut self, q: Quadratic) -> Self {
        self.quadratic = q;
        self
    }

    /// `LowRank` with the default rank `min(n, 4)`.
    pub fn low_rank_default(self) -> Self {
        let r = self.n.min(4);
        self.quadratic(Quadratic::LowRank(r))
    }

    pub fn scaling(mut self, on: bool) -> Self {
        self.scaling = on;
        self
    }

    pub fn build(self) -> Result<Architecture> {
        let ArchitectureBuilder {
            n,
            p,
            d,
            widths,
            activation,
            psi_hidden,
            psi_activation,
            monotonicity,
            quadratic,
            scaling,
        } = self;
        if d == 0 {
            return Err(PcfError::InvalidInput(
                "output dimension d must be >= 1".into(),
            ));
        }
        let widths = widths.unwrap_or_else(|| vec![default_width(n, d); 2]);
        if widths.is_empty() {
            return Err(PcfError::InvalidInput(
                "at least one hidden layer is required (L >= 2)".into(),
            ));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(PcfError::InvalidInput(format!(
                "width of hidden layer {} is 0",
                i + 1
            )));
        }
        let monotonicity = monotonicity.unwrap_or_else(|| vec![Monotonicity::None; n]);
        if monotonicity.len() != n {
            return Err(PcfError::DimensionMismatch {
                what: "monotonicity",
                expected: n,
                got: monotonicity.len(),
            });
        }
        let monotone = monotonicity.iter().any(|m| *m != Monotonicity::None);
        match quadratic {
            Quadratic::None => {}
            _ if monotone => {
                return Err(PcfError::Unsupported(
                    "a quadratic term cannot be combined with monotonicity constraints".into(),
                ))
            }
            Quadratic::LowRank(0) => {
                return Err(PcfError::InvalidInput(
                    "low-rank quadratic needs rank >= 1".into(),
                ))
            }
            _ if n == 0 => {
                return Err(PcfError::InvalidInput(
                    "quadratic term requires n >= 1".into(),
                ))
            }
            _ => {}
        }
        let mut sizes = widths.clone();
        sizes.push(d);
        let layout = BlockLayout::new(n, &sizes, quadratic, &monotonicity);
        let psi_hidden = psi_hidden.unwrap_or_else(|| {
            if p == 0 {
                Vec::new()
            } else {
                vec![((p + layout.m) / 2).max(1); 2]
            }
        });
        if let Some(i) = psi_hidden.iter().position(|&w| w == 0) {
            return Err(PcfError::InvalidInput(format!(
                "width of psi hidden layer {} is 0",
                i + 1
            )));
        }
        let psi_layout = PsiLayout::new(p, &psi_hidden, layout.m);
        Ok(Architecture {
            n,
            p,
            d,
            widths,
            activation: activation.unwrap_or(Activation::Relu),
            psi_hidden,
            psi_activation: psi_activation.unwrap_or(Activation::Relu),
            monotonicity,
            quadratic,
            scaling,
            layout,
            psi_layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_count_matches_hand_formula() {
        // n = d = 1, L = 3: n1 = n2 = 2, n3 = 1.
        let arch = Architecture::new(1, 4, 1).unwrap();
        assert_eq!(arch.widths, vec![2, 2]);
        let hand = 2 * 2 + 1 * 2 + (2 + 2 + 1) * 1 + (2 + 2 + 1);
        assert_eq!(hand, 16);
        assert_eq!(arch.emitted_len(), 16);
        // Block sizes counted from the layout itself.
        let lay = arch.layout();
        let mut counted = 0;
        for l in 2..=3 {
            counted += lay.width(l) * lay.width(l - 1);
        }
        for l in 1..=3 {
            counted += lay.width(l) * 1 + lay.width(l);
        }
        assert_eq!(counted, 16);
        assert_eq!(arch.psi_hidden, vec![10, 10]);
    }

    #[test]
    fn quadratic_terms_add_entries() {
        let base = Architecture::new(3, 2, 1).unwrap().emitted_len();
        let full = Architecture::builder(3, 2, 1)
            .quadratic(Quadratic::Full)
            .build()
            .unwrap();
        assert_eq!(full.emitted_len(), base + 6);
        let lr = Architecture::builder(3, 2, 1)
            .low_rank_default()
            .build()
            .unwrap();
        assert_eq!(lr.quadratic, Quadratic::LowRank(3));
        assert_eq!(lr.emitted_len(), base + 9 + 3);
    }

    #[test]
    fn default_width_has_minimum_two() {
        assert_eq!(default_width(0, 1), 2);
        assert_eq!(default_width(3, 1), 4);
        assert_eq!(default_width(2, 1), 2);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Architecture::builder(1, 1, 1)
            .widths(vec![])
            .build()
            .is_err());
        assert!(Architecture::builder(1, 1, 1)
            .widths(vec![2, 0])
            .build()
            .is_err());
        assert!(Architecture::new(1, 1, 0).is_err());
        assert!(Architecture::builder(2, 1, 1)
            .monotonicity(vec![Monotonicity::Increasing])
            .build()
            .is_err());
        assert!(Architecture::builder(1, 1, 1)
            .monotonicity(vec![Monotonicity::Increasing])
            .quadratic(Quadratic::Full)
            .build()
            .is_err());
    }

    #[test]
    fn heads_cover_w_and_monotone_columns() {
        let arch = Architecture::builder(2, 1, 1)
            .monotonicity(vec![Monotonicity::Increasing, Monotonicity::Decreasing])
            .build()
            .unwrap();
        let lay = arch.layout();
        for k in lay.w_range() {
            assert_eq!(lay.heads[k], Head::Nonneg);
        }
        for l in 1..=3 {
            for row in 0..lay.width(l) {
                assert_eq!(lay.heads[lay.v_offset(l) + row * 2], Head::Nonneg);
                assert_eq!(lay.heads[lay.v_offset(l) + row * 2 + 1], Head::Nonpos);
            }
            for k in 0..lay.width(l) {
                assert_eq!(lay.heads[lay.bias_offset(l) + k], Head::Identity);
            }
        }
    }

    #[test]
    fn p_zero_has_constant_psi() {
        let arch = Architecture::new(2, 0, 1).unwrap();
        assert!(arch.psi_hidden.is_empty());
        assert_eq!(arch.weight_len(), arch.emitted_len());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}

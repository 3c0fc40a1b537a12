//! The parameter network psi: a fully connected network with feedforward
//! from `theta` into every layer, emitting the convex network's weights.
//!
//! Weight vector layout, layer by layer: `[A_j, B_j, c_j]` with
//! `pre_j = A_j h_{j-1} + B_j theta + c_j` (`A_1` has no columns).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, Head};
use crate::error::{check_finite, check_len, PcfError, Result};
use crate::layers::MaterializedLayers;

/// Flat trainable weights of psi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(arch: &Architecture) -> Self {
        WeightVector(vec![0.0; arch.weight_len()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Glorot-uniform dense weights, zero offsets, and `+0.1` offsets on the
    /// heads feeding `phi_W` so the emitted `W` blocks start alive.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let psi = arch.psi_layout();
        let heads = &arch.layout().heads;
        let mut w = vec![0.0; psi.len];
        let last = psi.layers.len() - 1;
        for (j, layer) in psi.layers.iter().enumerate() {
            let fan_in = layer.inputs + psi.p;
            if fan_in > 0 {
                let a = (6.0 / (fan_in + layer.outputs) as f64).sqrt();
                for v in &mut w[layer.a_offset..layer.c_offset] {
                    *v = rng.gen_range(-a..a);
                }
            }
            if j == last {
                let a = (6.0 / (1 + layer.outputs) as f64).sqrt();
                for (k, head) in heads.iter().enumerate() {
                    let c = &mut w[layer.c_offset + k];
                    // psi without inputs is a learned constant; it needs a random start
                    let jitter = if fan_in == 0 {
                        rng.gen_range(-a..a)
                    } else {
                        0.0
                    };
                    *c = match head {
                        Head::Identity => jitter,
                        Head::Nonneg | Head::Nonpos => 0.1 + jitter.abs(),
                    };
                }
            }
        }
        WeightVector(w)
    }
}

/// Cached activations of one psi evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PsiTape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    /// Materialized layer values (after heads).
    pub out: Vec<f64>,
}

impl PsiTape {
    pub fn new(arch: &Architecture) -> Self {
        let psi = arch.psi_layout();
        PsiTape {
            pre: psi.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            post: psi.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            out: vec![0.0; arch.emitted_len()],
        }
    }
}

pub(crate) fn forward(
    arch: &Architecture,
    w: &[f64],
    theta: &[f64],
    tape: &mut PsiTape,
) -> Result<()> {
    let psi = arch.psi_layout();
    let last = psi.layers.len() - 1;
    let p = psi.p;
    for (j, layer) in psi.layers.iter().enumerate() {
        let (before, rest) = tape.post.split_at_mut(j);
        let prev: &[f64] = if j == 0 { &[] } else { &before[j - 1] };
        let pre = &mut tape.pre[j];
        let a = &w[layer.a_offset..layer.b_offset];
        let b = &w[layer.b_offset..layer.c_offset];
        let c = &w[layer.c_offset..layer.c_offset + layer.outputs];
        for r in 0..layer.outputs {
            let mut acc = c[r];
            for (ai, hi) in a[r * layer.inputs..(r + 1) * layer.inputs].iter().zip(prev) {
                acc += ai * hi;
            }
            for (bi, ti) in b[r * p..(r + 1) * p].iter().zip(theta) {
                acc += bi * ti;
            }
            pre[r] = acc;
        }
        if !pre.iter().all(|v| v.is_finite()) {
            return Err(PcfError::NonFiniteIntermediate {
                stage: "psi",
                layer: j + 1,
            });
        }
        if j < last {
            let act = arch.psi_activation;
            for (po, pr) in rest[0].iter_mut().zip(pre.iter()) {
                *po = act.apply(*pr);
            }
        } else {
            for ((o, pr), head) in tape
                .out
                .iter_mut()
                .zip(pre.iter())
                .zip(&arch.layout().heads)
            {
                *o = head.apply(*pr);
            }
        }
    }
    Ok(())
}

/// Propagates `dout` (cotangent of the materialized layers) back to `dw`.
/// Consumes `dout` as scratch.
pub(crate) fn backward(
    arch: &Architecture,
    w: &[f64],
    theta: &[f64],
    tape: &PsiTape,
    dout: &mut [f64],
    dw: &mut [f64],
) {
    let psi = arch.psi_layout();
    let p = psi.p;
    let last = psi.layers.len() - 1;
    for ((g, pre), head) in dout
        .iter_mut()
        .zip(&tape.pre[last])
        .zip(&arch.layout().heads)
    {
        *g *= head.deriv(*pre);
    }
    let mut cur: Vec<f64> = dout.to_vec();
    for j in (0..=last).rev() {
        let layer = &psi.layers[j];
        let prev: &[f64] = if j == 0 { &[] } else { &tape.post[j - 1] };
        let mut gprev = vec![0.0; layer.inputs];
        for r in 0..layer.outputs {
            let g = cur[r];
            if g == 0.0 {
                continue;
            }
            dw[layer.c_offset + r] += g;
            let ao = layer.a_offset + r * layer.inputs;
            for k in 0..layer.inputs {
                dw[ao + k] += g * prev[k];
                gprev[k] += g * w[ao + k];
            }
            let bo = layer.b_offset + r * p;
            for k in 0..p {
                dw[bo + k] += g * theta[k];
            }
        }
        if j > 0 {
            let act = arch.psi_activation;
            for (g, pre) in gprev.iter_mut().zip(&tape.pre[j - 1]) {
                *g *= act.deriv(*pre);
            }
            cur = gprev;
        }
    }
}

/// Materializes the convex network's weights for one parameter value.
pub fn psi_forward(
    arch: &Architecture,
    w: &WeightVector,
    theta: &[f64],
) -> Result<MaterializedLayers> {
    check_len("theta", arch.p, theta.len())?;
    check_len("weights", arch.weight_len(), w.len())?;
    check_finite("theta", theta)?;
    let mut tape = PsiTape::new(arch);
    forward(arch, &w.0, theta, &mut tape)?;
    MaterializedLayers::unflatten(arch, tape.out)
}

//! Materialized convex-network weights and the input-convex forward pass.

use crate::arch::{Activation, Architecture, BlockLayout, QuadLayout};
use crate::error::{check_finite, check_len, PcfError, Result};

/// Per-parameter weight blocks emitted by psi, stored in the canonical flat
/// layout (see [`crate::arch`]). `W^1` is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedLayers {
    values: Vec<f64>,
}

impl MaterializedLayers {
    pub fn unflatten(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        check_len("materialized layers", arch.emitted_len(), values.len())?;
        Ok(MaterializedLayers { values })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        MaterializedLayers {
            values: vec![0.0; arch.emitted_len()],
        }
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `W^l` (row-major, `n_l x n_{l-1}`), `l >= 2`.
    pub fn w(&self, lay: &BlockLayout, l: usize) -> &[f64] {
        let off = lay.w_offset(l);
        &self.values[off..off + lay.width(l) * lay.width(l - 1)]
    }

    /// `V^l` (row-major, `n_l x n`).
    pub fn v(&self, lay: &BlockLayout, l: usize) -> &[f64] {
        let off = lay.v_offset(l);
        &self.values[off..off + lay.width(l) * lay.n]
    }

    pub fn bias(&self, lay: &BlockLayout, l: usize) -> &[f64] {
        let off = lay.bias_offset(l);
        &self.values[off..off + lay.width(l)]
    }

    /// Dense `n x n` upper-triangular `U` when the full quadratic term is on.
    pub fn u_dense(&self, lay: &BlockLayout) -> Option<Vec<f64>> {
        let QuadLayout::Full { offset } = lay.quad else {
            return None;
        };
        let n = lay.n;
        let mut u = vec![0.0; n * n];
        let mut k = offset;
        for i in 0..n {
            for j in i..n {
                u[i * n + j] = self.values[k];
                k += 1;
            }
        }
        Some(u)
    }

    /// `(F, diag)` of the low-rank-plus-diagonal quadratic term.
    pub fn low_rank(&self, lay: &BlockLayout) -> Option<(&[f64], &[f64])> {
        let QuadLayout::LowRank {
            rank,
            f_offset,
            diag_offset,
        } = lay.quad
        else {
            return None;
        };
        Some((
            &self.values[f_offset..f_offset + rank * lay.n],
            &self.values[diag_offset..diag_offset + lay.n],
        ))
    }

    /// Dense `Q` of the quadratic term, if any.
    pub fn q_matrix(&self, lay: &BlockLayout) -> Option<Vec<f64>> {
        let n = lay.n;
        let factor: (Vec<f64>, usize) = match lay.quad {
            QuadLayout::None => return None,
            QuadLayout::Full { .. } => (self.u_dense(lay)?, n),
            QuadLayout::LowRank { rank, .. } => {
                let (f, dg) = self.low_rank(lay)?;
                let mut stacked = f.to_vec();
                for (j, dj) in dg.iter().enumerate() {
                    let mut row = vec![0.0; n];
                    row[j] = *dj;
                    stacked.extend(row);
                }
                (stacked, rank + n)
            }
        };
        let (r, rows) = factor;
        let mut q = vec![0.0; n * n];
        for k in 0..rows {
            for i in 0..n {
                for j in 0..n {
                    q[i * n + j] += r[k * n + i] * r[k * n + j];
                }
            }
        }
        Some(q)
    }
}

/// Scratch buffers for one forward/backward pass through the convex network.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    offsets: Vec<usize>,
    pre: Vec<f64>,
    post: Vec<f64>,
    grad: Vec<f64>,
    quad: Vec<f64>,
    pub y: Vec<f64>,
}

impl Tape {
    pub fn new(lay: &BlockLayout) -> Self {
        let mut offsets = Vec::with_capacity(lay.sizes.len());
        let mut total = 0;
        for &s in &lay.sizes {
            offsets.push(total);
            total += s;
        }
        let quad_len = match lay.quad {
            QuadLayout::None => 0,
            QuadLayout::Full { .. } => lay.n,
            QuadLayout::LowRank { rank, .. } => rank,
        };
        let d = *lay.sizes.last().unwrap();
        Tape {
            offsets,
            pre: vec![0.0; total],
            post: vec![0.0; total],
            grad: vec![0.0; total],
            quad: vec![0.0; quad_len],
            y: vec![0.0; d],
        }
    }
}

/// Value of the quadratic term, filling `tape.quad` with `U x` (or `F x`).
fn quad_forward(lay: &BlockLayout, vals: &[f64], x: &[f64], quad: &mut [f64]) -> f64 {
    let n = lay.n;
    match lay.quad {
        QuadLayout::None => 0.0,
        QuadLayout::Full { offset } => {
            let mut k = offset;
            let mut s = 0.0;
            for i in 0..n {
                let mut acc = 0.0;
                for xj in &x[i..n] {
                    acc += vals[k] * xj;
                    k += 1;
                }
                quad[i] = acc;
                s += acc * acc;
            }
            s
        }
        QuadLayout::LowRank {
            rank,
            f_offset,
            diag_offset,
        } => {
            let mut s = 0.0;
            for r in 0..rank {
                let row = &vals[f_offset + r * n..f_offset + (r + 1) * n];
                let acc: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                quad[r] = acc;
                s += acc * acc;
            }
            let mut sd = 0.0;
            for j in 0..n {
                let t = vals[diag_offset + j] * x[j];
                sd += t * t;
            }
            s + sd
        }
    }
}

/// Forward pass without argument validation; result left in `tape.y`.
pub(crate) fn forward(
    lay: &BlockLayout,
    act: Activation,
    vals: &[f64],
    x: &[f64],
    tape: &mut Tape,
) -> Result<()> {
    let n = lay.n;
    let big_l = lay.num_layers();
    for l in 1..=big_l {
        let out = lay.width(l);
        let inp = lay.width(l - 1);
        let v = &vals[lay.v_offset(l)..];
        let b = &vals[lay.bias_offset(l)..];
        let o = tape.offsets[l - 1];
        for r in 0..out {
            let mut acc = b[r];
            let vr = &v[r * n..(r + 1) * n];
            for (vi, xi) in vr.iter().zip(x) {
                acc += vi * xi;
            }
            if l >= 2 {
                let w = &vals[lay.w_offset(l) + r * inp..lay.w_offset(l) + (r + 1) * inp];
                let zp = &tape.post[tape.offsets[l - 2]..tape.offsets[l - 2] + inp];
                let mut wz = 0.0;
                for (wi, zi) in w.iter().zip(zp) {
                    wz += wi * zi;
                }
                acc += wz;
            }
            tape.pre[o + r] = acc;
        }
        let pre = &tape.pre[o..o + out];
        if !pre.iter().all(|a| a.is_finite()) {
            return Err(PcfError::NonFiniteIntermediate {
                stage: "icnn",
                layer: l,
            });
        }
        if l < big_l {
            for r in 0..out {
                tape.post[o + r] = act.apply(tape.pre[o + r]);
            }
        }
    }
    let o = tape.offsets[big_l - 1];
    let q = quad_forward(lay, vals, x, &mut tape.quad);
    if !q.is_finite() {
        return Err(PcfError::NonFiniteIntermediate {
            stage: "icnn",
            layer: big_l,
        });
    }
    for (i, y) in tape.y.iter_mut().enumerate() {
        *y = tape.pre[o + i] + q;
    }
    Ok(())
}

/// Reverse pass for the output cotangent `ybar`. Accumulates into `dvals`
/// (same layout as `vals`) and, when given, into `xbar`.
pub(crate) fn backward(
    lay: &BlockLayout,
    act: Activation,
    vals: &[f64],
    x: &[f64],
    tape: &mut Tape,
    ybar: &[f64],
    mut dvals: Option<&mut [f64]>,
    mut xbar: Option<&mut [f64]>,
) {
    let n = lay.n;
    let big_l = lay.num_layers();
    // gradient wrt pre-activation of the output layer is ybar itself
    let o = tape.offsets[big_l - 1];
    tape.grad[o..o + ybar.len()].copy_from_slice(ybar);
    let s: f64 = ybar.iter().sum();
    if s != 0.0 {
        quad_backward(
            lay,
            vals,
            x,
            &tape.quad,
            s,
            dvals.as_deref_mut(),
            xbar.as_deref_mut(),
        );
    }
    for l in (1..=big_l).rev() {
        let out = lay.width(l);
        let inp = lay.width(l - 1);
        let o = tape.offsets[l - 1];
        if l < big_l {
            // grad currently holds dL/dz^l; convert to dL/da^l
            for r in 0..out {
                tape.grad[o + r] *= act.deriv(tape.pre[o + r]);
            }
        }
        let (head, tail) = tape.grad.split_at_mut(o);
        let abar = &tail[..out];
        if let Some(dv) = dvals.as_deref_mut() {
            let vo = lay.v_offset(l);
            let bo = lay.bias_offset(l);
            for r in 0..out {
                let g = abar[r];
                if g == 0.0 {
                    continue;
                }
                dv[bo + r] += g;
                let row = &mut dv[vo + r * n..vo + (r + 1) * n];
                for (d, xi) in row.iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
            if l >= 2 {
                let wo = lay.w_offset(l);
                let zp = &tape.post[tape.offsets[l - 2]..tape.offsets[l - 2] + inp];
                for r in 0..out {
                    let g = abar[r];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut dv[wo + r * inp..wo + (r + 1) * inp];
                    for (d, zi) in row.iter_mut().zip(zp) {
                        *d += g * zi;
                    }
                }
            }
        }
        if let Some(xb) = xbar.as_deref_mut() {
            let v = &vals[lay.v_offset(l)..];
            for r in 0..out {
                let g = abar[r];
                if g == 0.0 {
                    continue;
                }
                for (xbi, vi) in xb.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                    *xbi += g * vi;
                }
            }
        }
        if l >= 2 {
            let po = tape.offsets[l - 2];
            let zbar = &mut head[po..po + inp];
            zbar.iter_mut().for_each(|z| *z = 0.0);
            let w = &vals[lay.w_offset(l)..];
            for r in 0..out {
                let g = abar[r];
                if g == 0.0 {
                    continue;
                }
                for (zb, wi) in zbar.iter_mut().zip(&w[r * inp..(r + 1) * inp]) {
                    *zb += g * wi;
                }
            }
        }
    }
}

fn quad_backward(
    lay: &BlockLayout,
    vals: &[f64],
    x: &[f64],
    ux: &[f64],
    s: f64,
    dvals: Option<&mut [f64]>,
    xbar: Option<&mut [f64]>,
) {
    let n = lay.n;
    match lay.quad {
        QuadLayout::None => {}
        QuadLayout::Full { offset } => {
            if let Some(dv) = dvals {
                let mut k = offset;
                for i in 0..n {
                    for xj in &x[i..n] {
                        dv[k] += 2.0 * s * ux[i] * xj;
                        k += 1;
                    }
                }
            }
            if let Some(xb) = xbar {
                // d/dx ||Ux||^2 = 2 U^T (U x)
                let mut k = offset;
                for i in 0..n {
                    for j in i..n {
                        xb[j] += 2.0 * s * vals[k] * ux[i];
                        k += 1;
                    }
                }
            }
        }
        QuadLayout::LowRank {
            rank,
            f_offset,
            diag_offset,
        } => {
            if let Some(dv) = dvals {
                for r in 0..rank {
                    for j in 0..n {
                        dv[f_offset + r * n + j] += 2.0 * s * ux[r] * x[j];
                    }
                }
                for j in 0..n {
                    dv[diag_offset + j] += 2.0 * s * vals[diag_offset + j] * x[j] * x[j];
                }
            }
            if let Some(xb) = xbar {
                for r in 0..rank {
                    for j in 0..n {
                        xb[j] += 2.0 * s * vals[f_offset + r * n + j] * ux[r];
                    }
                }
                for j in 0..n {
                    let dj = vals[diag_offset + j];
                    xb[j] += 2.0 * s * dj * dj * x[j];
                }
            }
        }
    }
}

/// Evaluates the convex network for already-materialized layers.
pub fn icnn_forward(
    layers: &MaterializedLayers,
    arch: &Architecture,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_len("x", arch.n, x.len())?;
    check_len(
        "materialized layers",
        arch.emitted_len(),
        layers.values.len(),
    )?;
    check_finite("x", x)?;
    let mut tape = Tape::new(arch.layout());
    forward(arch.layout(), arch.activation, &layers.values, x, &mut tape)?;
    Ok(tape.y)
}

/// Jacobian `dy/dx` (`d x n`, row-major) for already-materialized layers.
pub fn icnn_jacobian(
    layers: &MaterializedLayers,
    arch: &Architecture,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_len("x", arch.n, x.len())?;
    check_finite("x", x)?;
    let lay = arch.layout();
    let mut tape = Tape::new(lay);
    forward(lay, arch.activation, &layers.values, x, &mut tape)?;
    let d = arch.d;
    let n = arch.n;
    let mut jac = vec![0.0; d * n];
    let mut ybar = vec![0.0; d];
    for i in 0..d {
        ybar.iter_mut().for_each(|v| *v = 0.0);
        ybar[i] = 1.0;
        backward(
            lay,
            arch.activation,
            &layers.values,
            x,
            &mut tape,
            &ybar,
            None,
            Some(&mut jac[i * n..(i + 1) * n]),
        );
    }
    Ok(jac)
}

/// Forward-mode tangents for the x-Jacobian, kept for the second-order
/// reverse pass used by the argmin penalty.
#[derive(Debug, Clone)]
pub(crate) struct JacTape {
    base: Tape,
    /// `S^l = W^l T^{l-1} + V^l`, each `n_l x n`.
    s: Vec<f64>,
    /// `T^l = diag(phi'(a^l)) S^l`.
    t: Vec<f64>,
    sbar: Vec<f64>,
    tbar: Vec<f64>,
    mat_offsets: Vec<usize>,
    pub jac: Vec<f64>,
}

impl JacTape {
    pub fn new(lay: &BlockLayout) -> Self {
        let n = lay.n;
        let mut mat_offsets = Vec::new();
        let mut total = 0;
        for &s in &lay.sizes {
            mat_offsets.push(total);
            total += s * n;
        }
        let d = *lay.sizes.last().unwrap();
        JacTape {
            base: Tape::new(lay),
            s: vec![0.0; total],
            t: vec![0.0; total],
            sbar: vec![0.0; total],
            tbar: vec![0.0; total],
            mat_offsets,
            jac: vec![0.0; d * n],
        }
    }
}

/// Computes `J = dy/dx` by forward-mode tangent propagation, storing
/// everything needed by [`jacobian_backward`].
pub(crate) fn jacobian_forward(
    lay: &BlockLayout,
    act: Activation,
    vals: &[f64],
    x: &[f64],
    jt: &mut JacTape,
) -> Result<()> {
    forward(lay, act, vals, x, &mut jt.base)?;
    let n = lay.n;
    let big_l = lay.num_layers();
    for l in 1..=big_l {
        let out = lay.width(l);
        let inp = lay.width(l - 1);
        let mo = jt.mat_offsets[l - 1];
        let v = &vals[lay.v_offset(l)..lay.v_offset(l) + out * n];
        jt.s[mo..mo + out * n].copy_from_slice(v);
        if l >= 2 {
            let po = jt.mat_offsets[l - 2];
            let w = &vals[lay.w_offset(l)..];
            for r in 0..out {
                for k in 0..inp {
                    let wk = w[r * inp + k];
                    if wk == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        jt.s[mo + r * n + c] += wk * jt.t[po + k * n + c];
                    }
                }
            }
        }
        if l < big_l {
            let o = jt.base.offsets[l - 1];
            for r in 0..out {
                let dphi = act.deriv(jt.base.pre[o + r]);
                for c in 0..n {
                    jt.t[mo + r * n + c] = dphi * jt.s[mo + r * n + c];
                }
            }
        }
    }
    let mo = jt.mat_offsets[big_l - 1];
    let d = lay.width(big_l);
    jt.jac.copy_from_slice(&jt.s[mo..mo + d * n]);
    let qg = quad_gradient(lay, vals, x, &jt.base.quad);
    if let Some(qg) = qg {
        for i in 0..d {
            for c in 0..n {
                jt.jac[i * n + c] += qg[c];
            }
        }
    }
    if !jt.jac.iter().all(|v| v.is_finite()) {
        return Err(PcfError::NonFiniteIntermediate {
            stage: "icnn-jacobian",
            layer: big_l,
        });
    }
    Ok(())
}

/// Gradient of the quadratic term, `2 Q x`.
fn quad_gradient(lay: &BlockLayout, vals: &[f64], x: &[f64], ux: &[f64]) -> Option<Vec<f64>> {
    let n = lay.n;
    let mut g = vec![0.0; n];
    match lay.quad {
        QuadLayout::None => return None,
        QuadLayout::Full { offset } => {
            let mut k = offset;
            for i in 0..n {
                for j in i..n {
                    g[j] += 2.0 * vals[k] * ux[i];
                    k += 1;
                }
            }
        }
        QuadLayout::LowRank {
            rank,
            f_offset,
            diag_offset,
        } => {
            for r in 0..rank {
                for j in 0..n {
                    g[j] += 2.0 * vals[f_offset + r * n + j] * ux[r];
                }
            }
            for j in 0..n {
                let dj = vals[diag_offset + j];
                g[j] += 2.0 * dj * dj * x[j];
            }
        }
    }
    Some(g)
}

/// Reverse pass through [`jacobian_forward`] for the cotangent `jbar`
/// (`d x n`), accumulating into `dvals`.
pub(crate) fn jacobian_backward(
    lay: &BlockLayout,
    act: Activation,
    vals: &[f64],
    x: &[f64],
    jt: &mut JacTape,
    jbar: &[f64],
    dvals: &mut [f64],
) {
    let n = lay.n;
    let big_l = lay.num_layers();
    let d = lay.width(big_l);

    // quadratic part: J_i += 2 R^T R x for every output row i
    let mut s = vec![0.0; n];
    for i in 0..d {
        for c in 0..n {
            s[c] += jbar[i * n + c];
        }
    }
    quad_jacobian_backward(lay, vals, x, &jt.base.quad, &s, dvals);

    let mo = jt.mat_offsets[big_l - 1];
    jt.sbar[mo..mo + d * n].copy_from_slice(jbar);
    // cotangent of the primal pre-activations
    let tape = &mut jt.base;
    tape.grad.iter_mut().for_each(|g| *g = 0.0);

    for l in (1..=big_l).rev() {
        let out = lay.width(l);
        let inp = lay.width(l - 1);
        let mo = jt.mat_offsets[l - 1];
        let o = tape.offsets[l - 1];
        if l < big_l {
            // T^l = D S^l with D = phi'(a^l): sbar = D tbar, abar += phi'' sum(tbar * S)
            for r in 0..out {
                let a = tape.pre[o + r];
                let dphi = act.deriv(a);
                let d2phi = act.second_deriv(a);
                let mut acc = 0.0;
                for c in 0..n {
                    let tb = jt.tbar[mo + r * n + c];
                    jt.sbar[mo + r * n + c] = dphi * tb;
                    acc += tb * jt.s[mo + r * n + c];
                }
                // tape.grad holds dL/dz^l from the layer above
                tape.grad[o + r] = tape.grad[o + r] * dphi + acc * d2phi;
            }
        }
        // S^l = W^l T^{l-1} + V^l
        let vo = lay.v_offset(l);
        for k in 0..out * n {
            dvals[vo + k] += jt.sbar[mo + k];
        }
        if l >= 2 {
            let po = jt.mat_offsets[l - 2];
            let wo = lay.w_offset(l);
            for k in 0..inp {
                for c in 0..n {
                    jt.tbar[po + k * n + c] = 0.0;
                }
            }
            for r in 0..out {
                for k in 0..inp {
                    let mut acc = 0.0;
                    let wk = vals[wo + r * inp + k];
                    for c in 0..n {
                        let sb = jt.sbar[mo + r * n + c];
                        acc += sb * jt.t[po + k * n + c];
                        jt.tbar[po + k * n + c] += wk * sb;
                    }
                    dvals[wo + r * inp + k] += acc;
                }
            }
        }
        // primal path: a^l = W^l z^{l-1} + V^l x + w^l
        if l < big_l {
            let bo = lay.bias_offset(l);
            for r in 0..out {
                let g = tape.grad[o + r];
                if g == 0.0 {
                    continue;
                }
                dvals[bo + r] += g;
                for c in 0..n {
                    dvals[vo + r * n + c] += g * x[c];
                }
            }
            if l >= 2 {
                let po = tape.offsets[l - 2];
                let wo = lay.w_offset(l);
                for k in 0..inp {
                    tape.grad[po + k] = 0.0;
                }
                for r in 0..out {
                    let g = tape.grad[o + r];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..inp {
                        dvals[wo + r * inp + k] += g * tape.post[po + k];
                        tape.grad[po + k] += g * vals[wo + r * inp + k];
                    }
                }
            }
        }
    }
}

fn quad_jacobian_backward(
    lay: &BlockLayout,
    vals: &[f64],
    x: &[f64],
    ux: &[f64],
    s: &[f64],
    dvals: &mut [f64],
) {
    let n = lay.n;
    match lay.quad {
        QuadLayout::None => {}
        QuadLayout::Full { offset } => {
            // h = 2 s^T U^T U x ; dh/dU = 2 ((Ux) s^T + (Us) x^T)
            let mut us = vec![0.0; n];
            let mut k = offset;
            for i in 0..n {
                for j in i..n {
                    us[i] += vals[k] * s[j];
                    k += 1;
                }
            }
            let mut k = offset;
            for i in 0..n {
                for j in i..n {
                    dvals[k] += 2.0 * (ux[i] * s[j] + us[i] * x[j]);
                    k += 1;
                }
            }
        }
        QuadLayout::LowRank {
            rank,
            f_offset,
            diag_offset,
        } => {
            for r in 0..rank {
                let row = &vals[f_offset + r * n..f_offset + (r + 1) * n];
                let fs: f64 = row.iter().zip(s).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dvals[f_offset + r * n + j] += 2.0 * (ux[r] * s[j] + fs * x[j]);
                }
            }
            for j in 0..n {
                dvals[diag_offset + j] += 4.0 * s[j] * vals[diag_offset + j] * x[j];
            }
        }
    }
}

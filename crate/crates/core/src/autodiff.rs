//! Reverse-mode gradients of the training objective with respect to the
//! psi weights, hard-wired to this architecture.
//!
//! Samples sharing a `theta` share one psi evaluation: psi runs forward once
//! per distinct parameter, the convex network accumulates the cotangent of
//! the emitted weights over the group's samples, and psi runs backward once.

use crate::arch::{Activation, Architecture};
use crate::data::{Dataset, ThetaGroup};
use crate::error::{check_len, PcfError, Result};
use crate::layers::{self, JacTape, Tape};
use crate::loss::{check_labels, LossSpec, RegSpec};
use crate::psi::{self, PsiTape};

/// Gradient with the same length and layout as the weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A subset of a dataset, pre-grouped by `theta`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    data: &'a Dataset,
    groups: Vec<ThetaGroup>,
    count: usize,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a Dataset, indices: &[usize]) -> Self {
        Batch {
            data,
            groups: data.group_by_theta(indices),
            count: indices.len(),
        }
    }

    pub fn full(data: &'a Dataset) -> Self {
        let idx: Vec<usize> = (0..data.len()).collect();
        Self::new(data, &idx)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    /// Representative `theta` of each group with the group's sample count.
    pub(crate) fn group_thetas(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.groups
            .iter()
            .map(|g| (self.data.theta(g.rep), g.samples.len()))
    }
}

/// Reusable scratch space for repeated gradient evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    ptape: PsiTape,
    tape: Tape,
    jtape: JacTape,
    dout: Vec<f64>,
    ybar: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        Workspace {
            ptape: PsiTape::new(arch),
            tape: Tape::new(arch.layout()),
            jtape: JacTape::new(arch.layout()),
            dout: vec![0.0; arch.emitted_len()],
            ybar: vec![0.0; arch.d],
        }
    }
}

fn check_batch(arch: &Architecture, w: &[f64], batch: &Batch<'_>, loss: &LossSpec) -> Result<()> {
    check_len("weights", arch.weight_len(), w.len())?;
    let data = batch.data;
    check_len("data x", arch.n, data.n)?;
    check_len("data theta", arch.p, data.p)?;
    check_len("data y", arch.d, data.d)?;
    if batch.is_empty() {
        return Err(PcfError::InvalidInput("empty batch".into()));
    }
    loss.validate()?;
    if loss.is_classification() {
        check_labels(data.y_flat())?;
    }
    Ok(())
}

/// Data term plus weight regularizer, `(1/N) sum_k l_k + lambda r(w)`, and
/// its gradient with respect to `w`. The argmin penalty is separate, see
/// [`argmin_reg_and_grad`].
pub fn loss_and_grad(
    arch: &Architecture,
    w: &[f64],
    batch: &Batch<'_>,
    loss: &LossSpec,
    reg: &RegSpec,
) -> Result<(f64, GradientBuffer)> {
    check_batch(arch, w, batch, loss)?;
    reg.validate()?;
    let mut ws = Workspace::new(arch);
    let mut grad = vec![0.0; w.len()];
    let value = data_term(arch, w, batch, loss, &mut ws, &mut grad)?
        + reg.kind.value_and_grad(reg.lambda, w, &mut grad);
    finish(value, grad)
}

fn finish(value: f64, grad: Vec<f64>) -> Result<(f64, GradientBuffer)> {
    if !value.is_finite() {
        return Err(PcfError::NonFiniteIntermediate {
            stage: "objective",
            layer: 0,
        });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(PcfError::NonFiniteIntermediate {
            stage: "gradient",
            layer: 0,
        });
    }
    Ok((value, GradientBuffer(grad)))
}

/// Unchecked data term; accumulates into `grad`.
pub(crate) fn data_term(
    arch: &Architecture,
    w: &[f64],
    batch: &Batch<'_>,
    loss: &LossSpec,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64> {
    let data = batch.data;
    let lay = arch.layout();
    let d = arch.d;
    let scale = 1.0 / (batch.count * d) as f64;
    let mut total = 0.0;
    for group in &batch.groups {
        let theta = data.theta(group.rep);
        psi::forward(arch, w, theta, &mut ws.ptape)?;
        ws.dout.iter_mut().for_each(|v| *v = 0.0);
        let mut group_total = 0.0;
        for &k in &group.samples {
            let x = data.x(k);
            layers::forward(lay, arch.activation, &ws.ptape.out, x, &mut ws.tape)?;
            let y = data.y(k);
            for i in 0..d {
                let (v, g) = loss.value_and_deriv(ws.tape.y[i], y[i]);
                group_total += v;
                ws.ybar[i] = g * scale;
            }
            layers::backward(
                lay,
                arch.activation,
                &ws.ptape.out,
                x,
                &mut ws.tape,
                &ws.ybar,
                Some(&mut ws.dout),
                None,
            );
        }
        total += group_total * scale;
        psi::backward(arch, w, theta, &ws.ptape, &mut ws.dout, grad);
    }
    Ok(total)
}

/// One term of the argmin penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgminSample {
    pub theta: Vec<f64>,
    /// `g(theta)`, length `n`.
    pub point: Vec<f64>,
    /// `q(theta)`, `d x n` row-major; zero when absent.
    pub tilt: Option<Vec<f64>>,
    /// Multiplier of this term (`1/N` for a plain average).
    pub weight: f64,
}

/// `(rho_min / N) sum_k || grad_x f(g_k, theta_k) - q_k ||^2` and its gradient
/// with respect to `w`. Requires softplus so the second derivative exists.
pub fn argmin_reg_and_grad(
    arch: &Architecture,
    w: &[f64],
    thetas: &[Vec<f64>],
    g_targets: &[Vec<f64>],
    tilt_targets: Option<&[Vec<f64>]>,
    rho_min: f64,
) -> Result<(f64, GradientBuffer)> {
    check_len("weights", arch.weight_len(), w.len())?;
    check_len("argmin targets", thetas.len(), g_targets.len())?;
    if let Some(t) = tilt_targets {
        check_len("tilt targets", thetas.len(), t.len())?;
    }
    let count = thetas.len();
    let samples: Vec<ArgminSample> = (0..count)
        .map(|k| ArgminSample {
            theta: thetas[k].clone(),
            point: g_targets[k].clone(),
            tilt: tilt_targets.map(|t| t[k].clone()),
            weight: 1.0 / count.max(1) as f64,
        })
        .collect();
    for s in &samples {
        check_len("theta", arch.p, s.theta.len())?;
        check_len("argmin point", arch.n, s.point.len())?;
        if let Some(q) = &s.tilt {
            check_len("tilt", arch.n * arch.d, q.len())?;
        }
    }
    let mut ws = Workspace::new(arch);
    let mut grad = vec![0.0; w.len()];
    let v = argmin_term(arch, w, &samples, rho_min, &mut ws, &mut grad)?;
    finish(v, grad)
}

pub(crate) fn check_argmin_supported(arch: &Architecture, rho_min: f64) -> Result<()> {
    if rho_min > 0.0 && arch.activation == Activation::Relu {
        return Err(PcfError::Unsupported(
            "the argmin penalty needs second derivatives; use softplus activation".into(),
        ));
    }
    Ok(())
}

pub(crate) fn argmin_term(
    arch: &Architecture,
    w: &[f64],
    samples: &[ArgminSample],
    rho_min: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64> {
    if rho_min == 0.0 || samples.is_empty() {
        return Ok(0.0);
    }
    check_argmin_supported(arch, rho_min)?;
    let lay = arch.layout();
    let n = arch.n;
    let d = arch.d;
    let mut jbar = vec![0.0; n * d];
    let mut total = 0.0;
    for s in samples {
        psi::forward(arch, w, &s.theta, &mut ws.ptape)?;
        layers::jacobian_forward(lay, arch.activation, &ws.ptape.out, &s.point, &mut ws.jtape)?;
        let c = rho_min * s.weight;
        for k in 0..n * d {
            let q = s.tilt.as_ref().map_or(0.0, |q| q[k]);
            let r = ws.jtape.jac[k] - q;
            total += c * r * r;
            jbar[k] = 2.0 * c * r;
        }
        ws.dout.iter_mut().for_each(|v| *v = 0.0);
        layers::jacobian_backward(
            lay,
            arch.activation,
            &ws.ptape.out,
            &s.point,
            &mut ws.jtape,
            &jbar,
            &mut ws.dout,
        );
        psi::backward(arch, w, &s.theta, &ws.ptape, &mut ws.dout, grad);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Quadratic;
    use crate::layers::MaterializedLayers;
    use crate::loss::RegKind;
    use crate::psi::{psi_forward, WeightVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(arch: &Architecture, rows: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..rows * arch.n)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let th = (0..rows * arch.p)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let y = (0..rows * arch.d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Dataset::new(arch.n, arch.p, arch.d, x, th, y).unwrap()
    }

    #[test]
    fn interpolating_model_has_zero_loss_and_gradient() {
        let arch = Architecture::new(2, 1, 1).unwrap();
        let w = WeightVector::zeros(&arch);
        let mut data = toy_data(&arch, 6, 1);
        data = data.with_targets(1, vec![0.0; 6]).unwrap();
        let (v, g) = loss_and_grad(
            &arch,
            &w.0,
            &Batch::full(&data),
            &LossSpec::Quadratic,
            &RegSpec::none(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn l2_only_gradient_is_two_lambda_w() {
        let arch = Architecture::new(2, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..arch.weight_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        // zero-data-gradient point: targets equal the model's own predictions
        let data = toy_data(&arch, 5, 2);
        let model =
            crate::model::PcfModel::new(arch.clone(), WeightVector(w.clone()), None).unwrap();
        let data = data.with_targets(1, model.predict(&data).unwrap()).unwrap();
        let lambda = 0.3;
        let (_, g) = loss_and_grad(
            &arch,
            &w,
            &Batch::full(&data),
            &LossSpec::Quadratic,
            &RegSpec::l2(lambda),
        )
        .unwrap();
        for (gi, wi) in g.0.iter().zip(&w) {
            assert!((gi - 2.0 * lambda * wi).abs() <= 1e-15 * (1.0 + wi.abs()));
        }
    }

    #[test]
    fn batch_gradients_are_linear() {
        let arch = Architecture::builder(2, 2, 2)
            .activation(Activation::Softplus)
            .build()
            .unwrap();
        let data = toy_data(&arch, 40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = WeightVector::init(&arch, &mut rng);
        let all: Vec<usize> = (0..40).collect();
        let (va, ga) = loss_and_grad(
            &arch,
            &w.0,
            &Batch::new(&data, &all),
            &LossSpec::Quadratic,
            &RegSpec::none(),
        )
        .unwrap();
        let (v1, g1) = loss_and_grad(
            &arch,
            &w.0,
            &Batch::new(&data, &all[..13]),
            &LossSpec::Quadratic,
            &RegSpec::none(),
        )
        .unwrap();
        let (v2, g2) = loss_and_grad(
            &arch,
            &w.0,
            &Batch::new(&data, &all[13..]),
            &LossSpec::Quadratic,
            &RegSpec::none(),
        )
        .unwrap();
        let (a, b) = (13.0 / 40.0, 27.0 / 40.0);
        assert!((va - (a * v1 + b * v2)).abs() <= 1e-12 * va.abs());
        let scale = ga.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..ga.0.len() {
            assert!((ga.0[k] - (a * g1.0[k] + b * g2.0[k])).abs() <= 1e-12 * scale);
        }
    }

    fn quad_identity_weights(arch: &Architecture) -> Vec<f64> {
        // constant psi (p = 0): output offsets are the layers themselves
        let mut w = vec![0.0; arch.weight_len()];
        let c_off = arch.psi_layout().layers.last().unwrap().c_offset;
        let crate::arch::QuadLayout::Full { offset } = arch.layout().quad else {
            panic!()
        };
        let n = arch.n;
        let mut k = offset;
        for i in 0..n {
            for j in i..n {
                if i == j {
                    w[c_off + k] = 1.0;
                }
                k += 1;
            }
        }
        w
    }

    #[test]
    fn argmin_penalty_on_identity_quadratic() {
        let arch = Architecture::builder(2, 0, 1)
            .activation(Activation::Softplus)
            .quadratic(Quadratic::Full)
            .build()
            .unwrap();
        let w = quad_identity_weights(&arch);
        let layers = psi_forward(&arch, &WeightVector(w.clone()), &[]).unwrap();
        assert_eq!(
            layers.q_matrix(arch.layout()).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        let thetas = vec![vec![]; 3];
        let (v, _) =
            argmin_reg_and_grad(&arch, &w, &thetas, &vec![vec![0.0, 0.0]; 3], None, 2.0).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) =
            argmin_reg_and_grad(&arch, &w, &thetas, &vec![vec![1.0, 0.0]; 3], None, 2.0).unwrap();
        assert!((v - 4.0 * 2.0).abs() < 1e-12, "{v}");
        let (v, g) =
            argmin_reg_and_grad(&arch, &w, &thetas, &vec![vec![1.0, 0.0]; 3], None, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.0.iter().all(|x| *x == 0.0));
        let _ = MaterializedLayers::zeros(&arch);
    }

    #[test]
    fn argmin_with_relu_is_rejected() {
        let arch = Architecture::new(1, 1, 1).unwrap();
        let w = vec![0.0; arch.weight_len()];
        let r = argmin_reg_and_grad(&arch, &w, &[vec![0.0]], &[vec![0.0]], None, 1.0);
        assert!(matches!(r, Err(PcfError::Unsupported(_))));
    }

    fn fd_check(
        f: &mut dyn FnMut(&[f64]) -> f64,
        w: &[f64],
        grad: &[f64],
        coords: &[usize],
    ) -> f64 {
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let mut wp = w.to_vec();
        for &k in coords {
            wp[k] = w[k] + h;
            let fp = f(&wp);
            wp[k] = w[k] - h;
            let fm = f(&wp);
            wp[k] = w[k];
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs());
            scale = scale.max(fd.abs());
        }
        worst / scale.max(1e-12)
    }

    #[test]
    fn argmin_gradient_matches_finite_differences() {
        for quad in [Quadratic::None, Quadratic::Full, Quadratic::LowRank(1)] {
            let arch = Architecture::builder(2, 1, 2)
                .activation(Activation::Softplus)
                .psi_activation(Activation::Softplus)
                .quadratic(quad)
                .widths(vec![3, 4])
                .build()
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let w = WeightVector::init(&arch, &mut rng).0;
            let thetas: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let pts: Vec<Vec<f64>> = (0..4)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let tilts: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect();
            let (_, g) = argmin_reg_and_grad(&arch, &w, &thetas, &pts, Some(&tilts), 3.0).unwrap();
            let coords: Vec<usize> = (0..w.len()).collect();
            let mut f = |wv: &[f64]| {
                argmin_reg_and_grad(&arch, wv, &thetas, &pts, Some(&tilts), 3.0)
                    .unwrap()
                    .0
            };
            let err = fd_check(&mut f, &w, &g.0, &coords);
            assert!(err < 1e-6, "{quad:?}: rel err {err}");
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences_for_every_loss() {
        let arch = Architecture::builder(2, 2, 1)
            .activation(Activation::Softplus)
            .psi_activation(Activation::Softplus)
            .low_rank_default()
            .build()
            .unwrap();
        let data = toy_data(&arch, 8, 5);
        let labels = data
            .with_targets(
                1,
                data.y_flat()
                    .iter()
                    .map(|v| if *v > 0.0 { 1.0 } else { -1.0 })
                    .collect(),
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = WeightVector::init(&arch, &mut rng).0;
        let reg = RegSpec {
            lambda: 0.01,
            kind: RegKind::L2,
            ..Default::default()
        };
        for (loss, ds) in [
            (LossSpec::Quadratic, &data),
            (LossSpec::Huber { delta: 0.05 }, &data),
            (LossSpec::Logistic, &labels),
        ] {
            let batch = Batch::full(ds);
            let (_, g) = loss_and_grad(&arch, &w, &batch, &loss, &reg).unwrap();
            let coords: Vec<usize> = (0..w.len()).step_by(3).collect();
            let mut f = |wv: &[f64]| loss_and_grad(&arch, wv, &batch, &loss, &reg).unwrap().0;
            let err = fd_check(&mut f, &w, &g.0, &coords);
            assert!(err < 1e-5, "{loss:?}: rel err {err}");
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: usize,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamOutcome {
    /// Iterate with the lowest objective seen (the final iterate when
    /// `keep_best` is off).
    pub x: Vec<f64>,
    pub f: f64,
    pub steps: usize,
    /// Set when the objective became non-finite; `x` is then the last
    /// finite iterate.
    pub diverged: bool,
}

impl Adam {
    /// `objective(step, x, grad) -> value` fills `grad`. With `keep_best` the
    /// returned point is the best one evaluated (meaningful for full-batch
    /// objectives only).
    pub fn run<F>(&self, mut objective: F, x0: Vec<f64>, keep_best: bool) -> AdamOutcome
    where
        F: FnMut(usize, &[f64], &mut [f64]) -> f64,
    {
        let dim = x0.len();
        let mut x = x0;
        let mut g = vec![0.0; dim];
        let mut m = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        let mut best_x = x.clone();
        let mut best_f = f64::INFINITY;
        let mut last_f = f64::NAN;
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        for step in 0..self.iters {
            let f = objective(step, &x, &mut g);
            if !f.is_finite() || !g.iter().all(|a| a.is_finite()) {
                let (x, f) = if keep_best || last_f.is_nan() {
                    (best_x, best_f)
                } else {
                    (x, last_f)
                };
                return AdamOutcome {
                    x,
                    f,
                    steps: step,
                    diverged: true,
                };
            }
            if f < best_f {
                best_f = f;
                best_x.copy_from_slice(&x);
            }
            last_f = f;
            b1t *= self.beta1;
            b2t *= self.beta2;
            for i in 0..dim {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1t);
                let vh = v[i] / (1.0 - b2t);
                x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        // evaluate the final iterate so the returned value matches the point
        let f = objective(self.iters, &x, &mut g);
        let finite = f.is_finite() && g.iter().all(|a| a.is_finite());
        if finite && (f < best_f || !keep_best) {
            best_f = f;
            best_x.copy_from_slice(&x);
        }
        let diverged = !finite || !best_f.is_finite();
        AdamOutcome {
            x: best_x,
            f: best_f,
            steps: self.iters,
            diverged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let adam = Adam {
            lr: 0.05,
            iters: 2000,
            ..Default::default()
        };
        let out = adam.run(
            |_, x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 20.0 * (x[1] + 1.0);
                (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2)
            },
            vec![0.0, 0.0],
            true,
        );
        assert!(!out.diverged);
        assert!(
            (out.x[0] - 3.0).abs() < 1e-3 && (out.x[1] + 1.0).abs() < 1e-3,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn stops_on_non_finite() {
        let adam = Adam::default();
        let out = adam.run(
            |step, x, g| {
                g[0] = 1.0;
                if step == 3 {
                    f64::NAN
                } else {
                    x[0]
                }
            },
            vec![1.0],
            true,
        );
        assert!(out.diverged);
        assert_eq!(out.steps, 3);
        assert!(out.f.is_finite());
    }
}

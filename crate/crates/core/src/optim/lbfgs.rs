//! Limited-memory BFGS with a strong-Wolfe line search (bracketing phase
//! followed by a cubic-interpolation zoom).

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lbfgs {
    pub memory: usize,
    pub max_iters: usize,
    /// Cap on objective evaluations, line-search trials included.
    pub max_evals: Option<usize>,
    /// Stop when `max_i |g_i| <= grad_tol`.
    pub grad_tol: f64,
    /// Stop when an accepted step changes `f` by less than
    /// `f_tol * max(1, |f|)`.
    pub f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            memory: 10,
            max_iters: 2000,
            max_evals: None,
            grad_tol: 1e-10,
            f_tol: 1e-14,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientTolerance,
    NoProgress,
    MaxIterations,
    MaxEvaluations,
    /// No step along the search direction (or steepest descent) satisfied
    /// sufficient decrease.
    LineSearchFailed,
    /// The objective was non-finite at the starting point.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizer of the cubic through `(x1, f1, g1)` and `(x2, f2, g2)`, clamped
/// to `bounds` (defaults to the interval spanned by the two points).
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    if !(f1.is_finite() && f2.is_finite() && g1.is_finite() && g2.is_finite()) {
        return 0.5 * (lo + hi);
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Trial {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct Evaluator<'a, F> {
    objective: &'a mut F,
    evals: usize,
    point: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Evaluator<'_, F> {
    fn eval_at(&mut self, x: &[f64], t: f64, d: &[f64]) -> Trial {
        for ((p, xi), di) in self.point.iter_mut().zip(x).zip(d) {
            *p = xi + t * di;
        }
        let mut g = vec![0.0; x.len()];
        let mut f = (self.objective)(&self.point, &mut g);
        self.evals += 1;
        if !g.iter().all(|v| v.is_finite()) {
            f = f64::NAN;
        }
        if !f.is_finite() {
            f = f64::INFINITY;
        }
        let gtd = dot(&g, d);
        Trial { t, f, g, gtd }
    }
}

/// Strong-Wolfe line search. Returns the accepted trial, or `None` when no
/// trial satisfied sufficient decrease.
fn strong_wolfe<F: FnMut(&[f64], &mut [f64]) -> f64>(
    ev: &mut Evaluator<'_, F>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    gtd0: f64,
    t_init: f64,
    cfg: &Lbfgs,
    budget: usize,
) -> Option<Trial> {
    let (c1, c2) = (cfg.c1, cfg.c2);
    let max_ls = cfg.max_line_search.min(budget).max(1);
    let d_norm = max_abs(d);
    let armijo = |tr: &Trial| tr.f <= f0 + c1 * tr.t * gtd0;

    let mut prev = Trial {
        t: 0.0,
        f: f0,
        g: Vec::new(),
        gtd: gtd0,
    };
    let mut cur = ev.eval_at(x, t_init, d);
    let mut trials = 1;
    let (mut a, mut b) = loop {
        if !armijo(&cur) || (trials > 1 && cur.f >= prev.f) || cur.gtd >= 0.0 {
            if cur.gtd.abs() <= -c2 * gtd0 && armijo(&cur) && cur.f < prev.f {
                return Some(cur);
            }
            break (prev, cur);
        }
        if cur.gtd.abs() <= -c2 * gtd0 {
            return Some(cur);
        }
        if trials >= max_ls {
            // budget exhausted while still expanding; `cur` satisfies decrease
            return Some(cur);
        }
        let min_step = cur.t + 0.01 * (cur.t - prev.t);
        let max_step = cur.t * 10.0;
        let t_next = cubic_interpolate(
            prev.t,
            prev.f,
            prev.gtd,
            cur.t,
            cur.f,
            cur.gtd,
            Some((min_step, max_step)),
        );
        prev = cur;
        cur = ev.eval_at(x, t_next, d);
        trials += 1;
    };
    // zoom; `a` keeps the lower objective
    if b.f < a.f {
        std::mem::swap(&mut a, &mut b);
    }
    let mut insufficient_progress = false;
    while trials < max_ls {
        if (b.t - a.t).abs() * d_norm < 1e-12 {
            break;
        }
        let (lo, hi) = if a.t <= b.t { (a.t, b.t) } else { (b.t, a.t) };
        let mut t = cubic_interpolate(a.t, a.f, a.gtd, b.t, b.f, b.gtd, None);
        let eps = 0.1 * (hi - lo);
        if (hi - t).min(t - lo) < eps {
            if insufficient_progress || t >= hi || t <= lo {
                t = if (t - hi).abs() < (t - lo).abs() {
                    hi - eps
                } else {
                    lo + eps
                };
                insufficient_progress = false;
            } else {
                insufficient_progress = true;
            }
        } else {
            insufficient_progress = false;
        }
        let tr = ev.eval_at(x, t, d);
        trials += 1;
        if !armijo(&tr) || tr.f >= a.f {
            b = tr;
        } else {
            if tr.gtd.abs() <= -c2 * gtd0 {
                return Some(tr);
            }
            if tr.gtd * (b.t - a.t) >= 0.0 {
                b = std::mem::replace(&mut a, tr);
            } else {
                a = tr;
            }
        }
        if b.f < a.f {
            std::mem::swap(&mut a, &mut b);
        }
    }
    if a.t > 0.0 && armijo(&a) && !a.g.is_empty() {
        Some(a)
    } else {
        None
    }
}

impl Lbfgs {
    /// Minimizes `objective(x, grad) -> value` from `x0`.
    pub fn minimize<F>(&self, mut objective: F, x0: Vec<f64>) -> LbfgsOutcome
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let dim = x0.len();
        let mut x = x0;
        let mut g = vec![0.0; dim];
        let mut f = objective(&x, &mut g);
        let mut ev = Evaluator {
            objective: &mut objective,
            evals: 1,
            point: vec![0.0; dim],
        };
        let out = |x, f, g, it, evals, status| LbfgsOutcome {
            x,
            f,
            grad: g,
            iterations: it,
            evaluations: evals,
            status,
        };
        if !f.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return out(x, f, g, 0, 1, LbfgsStatus::NonFinite);
        }
        let max_evals = self.max_evals.unwrap_or(usize::MAX);
        let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.memory);
        let mut alpha = vec![0.0; self.memory.max(1)];
        let mut d = vec![0.0; dim];
        let mut iter = 0;
        loop {
            if max_abs(&g) <= self.grad_tol {
                return out(x, f, g, iter, ev.evals, LbfgsStatus::GradientTolerance);
            }
            if iter >= self.max_iters {
                return out(x, f, g, iter, ev.evals, LbfgsStatus::MaxIterations);
            }
            if ev.evals >= max_evals {
                return out(x, f, g, iter, ev.evals, LbfgsStatus::MaxEvaluations);
            }
            // two-loop recursion
            for (di, gi) in d.iter_mut().zip(&g) {
                *di = -gi;
            }
            for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
                let a = rho * dot(s, &d);
                alpha[k] = a;
                for (di, yi) in d.iter_mut().zip(y) {
                    *di -= a * yi;
                }
            }
            if let Some((s, y, _)) = hist.back() {
                let gamma = dot(s, y) / dot(y, y);
                d.iter_mut().for_each(|v| *v *= gamma);
            }
            for (k, (s, y, rho)) in hist.iter().enumerate() {
                let b = rho * dot(y, &d);
                for (di, si) in d.iter_mut().zip(s) {
                    *di += (alpha[k] - b) * si;
                }
            }
            let mut gtd = dot(&g, &d);
            if !(gtd < 0.0) {
                hist.clear();
                for (di, gi) in d.iter_mut().zip(&g) {
                    *di = -gi;
                }
                gtd = dot(&g, &d);
            }
            let t0 = if hist.is_empty() {
                (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
            } else {
                1.0
            };
            let budget = max_evals.saturating_sub(ev.evals);
            let Some(trial) = strong_wolfe(&mut ev, &x, &d, f, gtd, t0, self, budget) else {
                if hist.is_empty() {
                    return out(x, f, g, iter, ev.evals, LbfgsStatus::LineSearchFailed);
                }
                // retry once from steepest descent
                hist.clear();
                continue;
            };
            iter += 1;
            let s: Vec<f64> = d.iter().map(|v| v * trial.t).collect();
            let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
                if hist.len() == self.memory {
                    hist.pop_front();
                }
                if self.memory > 0 {
                    hist.push_back((s.clone(), y, 1.0 / ys));
                }
            }
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi += si;
            }
            let f_old = f;
            f = trial.f;
            g = trial.g;
            if (f_old - f).abs() <= self.f_tol * f.abs().max(1.0) {
                return out(x, f, g, iter, ev.evals, LbfgsStatus::NoProgress);
            }
        }
    }
}

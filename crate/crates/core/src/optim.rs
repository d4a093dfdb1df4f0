//! Weighted multinomial logistic regression with a Gaussian penalty.
//!
//! Used for the global maximum-entropy classifier (one-hot targets) and for
//! the local conditional model of the discriminative variant (soft targets).
//! The objective is concave, so a quasi-Newton ascent with a backtracking
//! line search reaches the gradient tolerance without tuning.

use std::collections::VecDeque;

use crate::numerics::log_sum_exp;

/// Sparse feature counts for one row: `(feature id, count)`.
pub type SparseRow = Vec<(usize, f64)>;

/// Collapses a bag of ids into sorted `(id, count)` pairs.
pub fn bag_counts(bag: &[usize]) -> SparseRow {
    let mut ids = bag.to_vec();
    ids.sort_unstable();
    let mut out: SparseRow = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((last, c)) if *last == id => *c += 1.0,
            _ => out.push((id, 1.0)),
        }
    }
    out
}

/// Softmax weights laid out class-major: class `c` owns
/// `params[c * (dim + 1)..(c + 1) * (dim + 1)]`, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams {
    pub classes: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl SoftmaxParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        SoftmaxParams {
            classes,
            dim,
            values: vec![0.0; classes * (dim + 1)],
        }
    }

    pub fn stride(&self) -> usize {
        self.dim + 1
    }

    pub fn weight(&self, class: usize, feat: usize) -> f64 {
        self.values[class * self.stride() + feat]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.values[class * self.stride() + self.dim]
    }

    /// Unnormalized class scores for one row.
    pub fn scores(&self, row: &[(usize, f64)]) -> Vec<f64> {
        scores(&self.values, self.classes, self.dim, row)
    }

    /// Class log-probabilities for one row.
    pub fn log_posterior(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let mut s = self.scores(row);
        let lse = log_sum_exp(&s).expect("finite softmax scores");
        for x in &mut s {
            *x -= lse;
        }
        s
    }
}

fn scores(values: &[f64], classes: usize, dim: usize, row: &[(usize, f64)]) -> Vec<f64> {
    let stride = dim + 1;
    (0..classes)
        .map(|c| {
            let w = &values[c * stride..(c + 1) * stride];
            w[dim] + row.iter().map(|&(j, x)| w[j] * x).sum::<f64>()
        })
        .collect()
}

/// Settings for [`fit_softmax`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub prior_variance: f64,
    pub penalize_bias: bool,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            prior_variance: 1.0,
            penalize_bias: true,
            grad_tol: 1e-5,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: SoftmaxParams,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// The penalized weighted log-likelihood that [`fit_softmax`] maximizes.
pub struct SoftmaxObjective<'a> {
    rows: &'a [SparseRow],
    targets: &'a [Vec<f64>],
    classes: usize,
    dim: usize,
    opts: FitOptions,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(
        rows: &'a [SparseRow],
        targets: &'a [Vec<f64>],
        classes: usize,
        dim: usize,
        opts: FitOptions,
    ) -> Self {
        debug_assert_eq!(rows.len(), targets.len());
        SoftmaxObjective {
            rows,
            targets,
            classes,
            dim,
            opts,
        }
    }

    /// Weighted log-likelihood term only, without the penalty.
    pub fn weighted_log_likelihood(&self, values: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(self.targets)
            .map(|(row, t)| {
                let s = scores(values, self.classes, self.dim, row);
                let lse = log_sum_exp(&s).expect("finite scores");
                t.iter()
                    .zip(&s)
                    .filter(|(&tc, _)| tc > 0.0)
                    .map(|(&tc, &sc)| tc * (sc - lse))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn penalty(&self, values: &[f64]) -> f64 {
        let stride = self.dim + 1;
        let sq: f64 = values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.opts.penalize_bias || i % stride != self.dim)
            .map(|(_, w)| w * w)
            .sum();
        sq / (2.0 * self.opts.prior_variance)
    }

    pub fn value(&self, values: &[f64]) -> f64 {
        self.weighted_log_likelihood(values) - self.penalty(values)
    }

    /// Objective value and its gradient.
    pub fn value_and_grad(&self, values: &[f64], grad: &mut [f64]) -> f64 {
        let stride = self.dim + 1;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        for (row, t) in self.rows.iter().zip(self.targets) {
            let s = scores(values, self.classes, self.dim, row);
            let lse = log_sum_exp(&s).expect("finite scores");
            let mass: f64 = t.iter().sum();
            for c in 0..self.classes {
                let log_p = s[c] - lse;
                if t[c] > 0.0 {
                    ll += t[c] * log_p;
                }
                let r = t[c] - mass * log_p.exp();
                let g = &mut grad[c * stride..(c + 1) * stride];
                for &(j, x) in row {
                    g[j] += r * x;
                }
                g[self.dim] += r;
            }
        }
        let inv_var = 1.0 / self.opts.prior_variance;
        let mut pen = 0.0;
        for (i, (g, &w)) in grad.iter_mut().zip(values).enumerate() {
            if self.opts.penalize_bias || i % stride != self.dim {
                *g -= w * inv_var;
                pen += w * w;
            }
        }
        ll - 0.5 * pen * inv_var
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Maximizes the penalized weighted softmax log-likelihood from `init`.
///
/// Every accepted step strictly increases the objective, so the result is
/// never worse than the starting point. A point where even a short
/// steepest-ascent step cannot increase the objective counts as converged.
pub fn fit_softmax(
    rows: &[SparseRow],
    targets: &[Vec<f64>],
    init: SoftmaxParams,
    opts: FitOptions,
) -> FitOutcome {
    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;

    let objective = SoftmaxObjective::new(rows, targets, init.classes, init.dim, opts);
    let n = init.values.len();
    let mut x = init.values;
    let mut g = vec![0.0; n];
    let mut f = objective.value_and_grad(&x, &mut g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut iterations = 0;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut stalled = false;

    while norm(&g) > opts.grad_tol && iterations < opts.max_iters {
        iterations += 1;
        // two-loop recursion on the ascent direction
        let mut d = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let scale = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= scale);
        } else {
            let scale = 1.0 / norm(&g).max(1.0);
            d.iter_mut().for_each(|di| *di *= scale);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope > 0.0) {
            history.clear();
            d = g.clone();
            let scale = 1.0 / norm(&g).max(1.0);
            d.iter_mut().for_each(|di| *di *= scale);
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = objective.value_and_grad(&x_new, &mut g_new);
            if f_new.is_finite() && f_new >= f + ARMIJO * step * slope && f_new > f {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                // ascent form: y = -(g_new - g)
                let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-300 {
                    if history.len() == MEMORY {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if history.is_empty() {
                // no ascent possible at working precision
                stalled = true;
                break;
            }
            history.clear();
        }
    }

    let grad_norm = norm(&g);
    FitOutcome {
        params: SoftmaxParams {
            classes: init.classes,
            dim: init.dim,
            values: x,
        },
        objective: f,
        grad_norm,
        iterations,
        converged: stalled || grad_norm <= opts.grad_tol,
    }
}

//! Limited-memory BFGS with a weak-Wolfe bracketing line search.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `‖g‖_∞` falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of one iteration falls below this.
    pub rel_tol: f64,
    pub armijo: f64,
    pub curvature: f64,
    pub max_line_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 300,
            grad_tol: 1e-6,
            rel_tol: 1e-12,
            armijo: 1e-4,
            curvature: 0.9,
            max_line_evals: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LbfgsStatus {
    GradientTolerance,
    SmallDecrease,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

/// Minimizes `f`, which returns the value and gradient. Non-finite values
/// are treated as failed trial points and shrink the step.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    if !fx.is_finite() {
        return LbfgsResult {
            x,
            value: fx,
            gradient: g,
            iterations,
            evaluations,
            status: LbfgsStatus::LineSearchFailed,
        };
    }

    while iterations < opts.max_iters {
        if g.amax() <= opts.grad_tol {
            status = LbfgsStatus::GradientTolerance;
            break;
        }
        let mut d = -two_loop(&g, &pairs);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            // curvature pairs went stale; fall back to steepest descent
            pairs.clear();
            d = -&g;
            slope = -g.norm_squared();
        }
        let first = if pairs.is_empty() {
            (1.0 / g.norm()).min(1.0)
        } else {
            1.0
        };

        let Some(step) = wolfe_search(&mut f, &x, fx, slope, &d, first, opts, &mut evaluations) else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s = &step.x - &x;
        let y = &step.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - step.f;
        x = step.x;
        fx = step.f;
        g = step.g;
        if decrease <= opts.rel_tol * fx.abs().max(1.0) {
            status = LbfgsStatus::SmallDecrease;
            break;
        }
    }
    if iterations >= opts.max_iters && g.amax() <= opts.grad_tol {
        status = LbfgsStatus::GradientTolerance;
    }
    LbfgsResult {
        x,
        value: fx,
        gradient: g,
        iterations,
        evaluations,
        status,
    }
}

fn two_loop(g: &DVector<f64>, pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}

struct Trial {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

/// Bisection/expansion search for a step satisfying the weak Wolfe
/// conditions. Falls back to the best Armijo point when curvature cannot be
/// met within the evaluation budget.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    fx: f64,
    slope: f64,
    d: &DVector<f64>,
    first: f64,
    opts: &LbfgsOptions,
    evaluations: &mut usize,
) -> Option<Trial>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut t = first;
    let mut armijo_best: Option<Trial> = None;
    for _ in 0..opts.max_line_evals {
        let xt = x + d * t;
        let (ft, gt) = f(&xt);
        *evaluations += 1;
        if !ft.is_finite() || ft > fx + opts.armijo * t * slope {
            hi = t;
        } else {
            let better = armijo_best.as_ref().map(|b| ft < b.f).unwrap_or(true);
            let curv_ok = gt.dot(d) >= opts.curvature * slope;
            let trial = Trial { x: xt, f: ft, g: gt };
            if curv_ok {
                return Some(trial);
            }
            if better {
                armijo_best = Some(trial);
            }
            lo = t;
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
    }
    armijo_best.filter(|b| b.f < fx)
}

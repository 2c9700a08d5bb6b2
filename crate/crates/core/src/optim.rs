//! Inner solvers for the M-steps: L-BFGS with backtracking, Newton for
//! weighted logistic regression, and weighted least squares.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{dot, log_sigmoid, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// Stop when the largest gradient component is below this.
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `f`, which returns the value and gradient. Evaluation errors and
/// non-finite values during the line search are treated as `+inf`.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fitting("objective is not finite at the starting point".into()));
    }
    let mut x = x0.to_vec();
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut line_search_failed = false;
    while iterations < opts.max_iter {
        if inf_norm(&g) <= opts.grad_tol {
            break;
        }
        iterations += 1;

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = if hist.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) && fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !hist.is_empty() {
                hist.clear();
                continue;
            }
            line_search_failed = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let progress = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if progress <= 1e-16 * fx.abs().max(1.0) && inf_norm(&g) <= opts.grad_tol * 1e3 {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    Ok(LbfgsResult {
        x,
        value: fx,
        grad_norm,
        iterations,
        converged: grad_norm <= opts.grad_tol,
        line_search_failed,
    })
}

/// Ridge penalty used when a logistic block has no finite maximizer.
pub const RIDGE_FALLBACK: f64 = 1e-6;
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub ridge_used: bool,
    pub converged: bool,
}

/// Penalized weighted log-likelihood
/// `sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)] - ridge/2 |beta|^2`
/// with soft labels `y_i` in `[0, 1]`.
pub fn logistic_objective(design: &[f64], ncol: usize, labels: &[f64], weights: &[f64], coef: &[f64], ridge: f64) -> f64 {
    let mut ll = 0.0;
    for ((row, &y), &w) in design.chunks_exact(ncol).zip(labels).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let eta = dot(row, coef);
        ll += w * (y * log_sigmoid(eta) + (1.0 - y) * log_sigmoid(-eta));
    }
    ll - 0.5 * ridge * dot(coef, coef)
}

fn newton_logistic(
    design: &[f64],
    ncol: usize,
    labels: &[f64],
    weights: &[f64],
    init: &[f64],
    ridge: f64,
    max_iter: usize,
) -> (Vec<f64>, bool) {
    let mut coef = init.to_vec();
    let mut obj = logistic_objective(design, ncol, labels, weights, &coef, ridge);
    for _ in 0..max_iter {
        let mut grad = DVector::<f64>::zeros(ncol);
        let mut hess = DMatrix::<f64>::zeros(ncol, ncol);
        for ((row, &y), &w) in design.chunks_exact(ncol).zip(labels).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let p = sigmoid(dot(row, &coef));
            let r = w * (y - p);
            let v = w * p * (1.0 - p);
            for a in 0..ncol {
                grad[a] += r * row[a];
                for b in 0..=a {
                    hess[(a, b)] += v * row[a] * row[b];
                }
            }
        }
        for a in 0..ncol {
            grad[a] -= ridge * coef[a];
            hess[(a, a)] += ridge;
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let mut jitter = hess.clone();
                let scale = (0..ncol).map(|a| hess[(a, a)]).fold(1e-12, f64::max);
                for a in 0..ncol {
                    jitter[(a, a)] += 1e-10 * scale;
                }
                match jitter.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => grad.clone(),
                }
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + t * s).collect();
            let o = logistic_objective(design, ncol, labels, weights, &cand, ridge);
            if o >= obj - 1e-12 * obj.abs().max(1.0) {
                let done = step.iter().all(|s| (t * s).abs() <= 1e-10);
                coef = cand;
                obj = o;
                improved = true;
                if done {
                    return (coef, true);
                }
                break;
            }
            t *= 0.5;
        }
        if !improved {
            let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return (coef, gmax <= 1e-8 * weights.iter().sum::<f64>().max(1.0));
        }
        if coef.iter().any(|c| c.abs() > SEPARATION_BOUND) && ridge == 0.0 {
            return (coef, false);
        }
    }
    (coef, false)
}

/// Weighted logistic regression with soft labels by Newton's method. Falls
/// back to a small ridge penalty when the data are separable.
pub fn weighted_logistic(
    design: &[f64],
    ncol: usize,
    labels: &[f64],
    weights: &[f64],
    init: Option<&[f64]>,
) -> Result<LogisticFit> {
    let n = labels.len();
    if design.len() != n * ncol || weights.len() != n {
        return Err(Error::Shape("logistic design, labels and weights disagree".into()));
    }
    let zeros = vec![0.0; ncol];
    let start = match init {
        Some(c) if c.len() == ncol && c.iter().all(|v| v.is_finite() && v.abs() <= SEPARATION_BOUND) => c,
        _ => &zeros[..],
    };
    let (coef, ok) = newton_logistic(design, ncol, labels, weights, start, 0.0, 100);
    if ok && coef.iter().all(|c| c.abs() <= SEPARATION_BOUND) {
        return Ok(LogisticFit {
            coef,
            ridge_used: false,
            converged: true,
        });
    }
    let (coef, ok) = newton_logistic(design, ncol, labels, weights, &zeros, RIDGE_FALLBACK, 500);
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Fitting("logistic regression diverged".into()));
    }
    Ok(LogisticFit {
        coef,
        ridge_used: true,
        converged: ok,
    })
}

/// Weighted least squares `argmin sum_i w_i (y_i - x_i' beta)^2`.
pub fn weighted_least_squares(design: &[f64], ncol: usize, y: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    if design.len() != n * ncol || weights.len() != n {
        return Err(Error::Shape("least-squares design, response and weights disagree".into()));
    }
    let mut xtx = DMatrix::<f64>::zeros(ncol, ncol);
    let mut xty = DVector::<f64>::zeros(ncol);
    for ((row, &yi), &w) in design.chunks_exact(ncol).zip(y).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..ncol {
            xty[a] += w * row[a] * yi;
            for b in 0..=a {
                xtx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..ncol {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let sol = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => xtx
            .svd(true, true)
            .solve(&xty, 1e-12)
            .map_err(|e| Error::Fitting(format!("least squares: {e}")))?,
    };
    Ok(sol.iter().copied().collect())
}

//! Limited-memory BFGS with backtracking line search.
//!
//! Plain two-loop recursion over the last `memory` curvature pairs, Armijo
//! backtracking from a unit step, and a cautious update rule that skips pairs
//! with non-positive curvature. Everything is sequential f64 arithmetic, so
//! the iterate path is deterministic.

use crate::error::Result;
use crate::util::{dot, norm2};

pub struct Options {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the gradient l2 norm drops below this.
    pub grad_tol: f64,
}

pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize a smooth convex function given its value-and-gradient closure.
/// `accept` may impose extra convergence requirements beyond the gradient
/// norm (e.g. a feasibility residual); it is consulted only once the norm
/// test passes.
pub fn minimize<F, A>(
    mut f: F,
    x0: Vec<f64>,
    opts: &Options,
    mut accept: A,
) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    A: FnMut(&[f64], &[f64]) -> bool,
{
    let dim = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; dim];
    let mut value = f(&x, &mut grad)?;

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut h0 = 1.0f64;

    let mut new_grad = vec![0.0; dim];
    for iter in 0..opts.max_iterations {
        let gnorm = norm2(&grad);
        if gnorm <= opts.grad_tol && accept(&x, &grad) {
            return Ok(Minimum {
                x,
                value,
                grad,
                iterations: iter,
                converged: true,
            });
        }

        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        for qj in q.iter_mut() {
            *qj *= h0;
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // Fall back to steepest descent if the model direction is bad.
            dir = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            h0 = 1.0;
        }

        // Armijo backtracking.
        let mut step = 1.0f64;
        let c1 = 1e-4;
        let mut trial = vec![0.0; dim];
        let mut accepted = false;
        let mut new_value = value;
        for _ in 0..60 {
            for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&dir) {
                *t = xi + step * di;
            }
            match f(&trial, &mut new_grad) {
                Ok(v) if v.is_finite() && v <= value + c1 * step * slope => {
                    new_value = v;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            // No admissible step: the iterate is as good as the arithmetic
            // allows. Report convergence state through `accept`.
            return Ok(Minimum {
                converged: gnorm <= opts.grad_tol && accept(&x, &grad),
                x,
                value,
                grad,
                iterations: iter,
            });
        }

        let s: Vec<f64> = trial.iter().zip(&x).map(|(t, xi)| t - xi).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(ng, g)| ng - g).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            let yy = dot(&y, &y);
            h0 = sy / yy;
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }
        x = trial;
        value = new_value;
        std::mem::swap(&mut grad, &mut new_grad);
    }

    let gnorm = norm2(&grad);
    let converged = gnorm <= opts.grad_tol && accept(&x, &grad);
    Ok(Minimum {
        x,
        value,
        grad,
        iterations: opts.max_iterations,
        converged,
    })
}

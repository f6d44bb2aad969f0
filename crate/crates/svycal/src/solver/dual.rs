//! Dual objective and the quasi-Newton dual solve.
//!
//! With `z_s = sum_k D_s^(k) . beta^(k)` and `c_s = clip(z_s, L, U)`, the
//! dual objective is
//!
//! ```text
//!     q(beta) = (1/N) sum_s [ n_s (c_s z_s - c_s^2/2) - N^P_s z_s ]
//!               + sum_{k>=2} (lambda_k/2) ||beta^(k)||^2,
//! ```
//!
//! the negated inner minimization of the box-constrained Lagrangian. For
//! `L = 0, U = +inf` the data term reduces to
//! `(1/2N) sum_s n_s max{0, z_s}^2 - (1/N) sum_s N^P_s z_s`. The gradient of
//! block `k` is `(1/N) D^(k)' (diag(n) c - N^P) + lambda_k beta^(k)` (no
//! penalty term for exact blocks), so at a stationary point the imbalance of
//! a penalized order satisfies `(1/N) ||imbalance_k||_2 = lambda_k
//! ||beta^(k)||_2` exactly.

use super::lbfgs;
use super::{CalibrationSpec, DualSolution, Problem, SolveStatus};
use crate::design::{CellTable, InteractionDesign};
use crate::error::Result;
use crate::util::norm2;

/// Evaluate the dual objective and its gradient at `beta` (stacked over the
/// orders the spec includes, i.e. those with finite penalties).
pub fn dual_value_grad(
    beta: &[f64],
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<(f64, Vec<f64>)> {
    let problem = Problem::new(design, table, spec)?;
    let mut grad = vec![0.0; problem.num_cols];
    let value = problem.eval(beta, &mut grad)?;
    Ok((value, grad))
}

/// Minimize the dual from a cold or warm start.
pub fn solve_dual(
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<DualSolution> {
    let problem = Problem::new(design, table, spec)?;
    problem.check_exact_feasibility()?;
    solve_dual_prepared(&problem, None)
}

pub(crate) fn solve_dual_prepared(
    problem: &Problem<'_>,
    warm: Option<&DualSolution>,
) -> Result<DualSolution> {
    let x0 = match warm {
        Some(w) => warm_start_vector(problem, w),
        None => vec![0.0; problem.num_cols],
    };
    let balance_limit = problem.spec.balance_tol * problem.n_total;
    let out = lbfgs::minimize(
        |beta, grad| problem.eval(beta, grad),
        x0,
        &lbfgs::Options {
            memory: 10,
            max_iterations: problem.spec.max_iterations,
            grad_tol: problem.spec.grad_tol,
        },
        |_, grad| problem.exact_residual_inf(grad) <= balance_limit,
    )?;
    let status = if out.converged {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    Ok(DualSolution {
        beta: out.x,
        included_orders: problem.included_orders.clone(),
        block_ranges: problem.order_ranges.clone(),
        iterations: out.iterations,
        grad_norm: norm2(&out.grad),
        value: out.value,
        status,
    })
}

/// Copy matching order blocks from a previous solution; new blocks start at
/// zero. Lets a penalty sweep chain solutions across adjacent grid points.
fn warm_start_vector(problem: &Problem<'_>, warm: &DualSolution) -> Vec<f64> {
    let mut x0 = vec![0.0; problem.num_cols];
    for (idx, &k) in problem.included_orders.iter().enumerate() {
        let dst = problem.order_ranges[idx].clone();
        let src = warm.block(k);
        if src.len() == dst.len() {
            x0[dst].copy_from_slice(src);
        }
    }
    x0
}

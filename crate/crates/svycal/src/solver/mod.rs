//! Multilevel calibration solved through its Lagrangian dual.
//!
//! The primal program finds cell weights `gamma` that exactly balance
//! first-order margins (including the intercept, so weights sum to N),
//! approximately balance interaction orders `2..=K` with per-order penalties
//! `lambda_k`, and keep the sum of squared weights small:
//!
//! ```text
//!     minimize    sum_{k>=2} ||D^(k)' (diag(n) g - N^P)||^2 / (2 N^2 lambda_k)
//!                 + sum_s n_s g(s)^2 / (2N)
//!     subject to  D^(1)' (diag(n) g - N^P) = 0,    L <= g(s) <= U
//! ```
//!
//! Orders with `lambda_k = 0` join the exact constraints; orders with
//! `lambda_k = +inf` are dropped entirely (pure raking in the limit). The
//! dual is unconstrained and smooth with `sum_k m_k` variables, solved by
//! limited-memory quasi-Newton; the primal weights are recovered through the
//! clip link `g(s) = clip(D_s . beta, L, U)`.

mod dual;
mod kkt;
mod lbfgs;
pub mod oracle;
mod unreg;

pub use dual::{dual_value_grad, solve_dual};
pub use kkt::{kkt_report, KktOrderRow, KktReport};
pub use unreg::{solve_unregularized, UnregularizedSolution};

use crate::design::{CellTable, CsrRows, InteractionDesign};
use crate::error::{Error, Result};
use crate::util::{clip, ksum, norm2, KahanSum};
use std::ops::Range;

/// Hyperparameters and tolerances for one calibration solve.
#[derive(Debug, Clone)]
pub struct CalibrationSpec {
    /// Highest interaction order `K` entering the program.
    pub max_order: usize,
    /// Penalties for orders `2..=K` (`lambda[i]` is the penalty of order
    /// `i + 2`). `0` makes the order an exact constraint, `+inf` drops it
    /// from the objective entirely. The first-order penalty is implicitly 0.
    pub lambda: Vec<f64>,
    /// Box constraint `(L, U)` on the weights.
    pub bounds: (f64, f64),
    /// First-order (and exact-order) residual tolerance, relative to N.
    pub balance_tol: f64,
    /// Dual gradient norm tolerance.
    pub grad_tol: f64,
    pub max_iterations: usize,
}

impl CalibrationSpec {
    /// Raking on margins only.
    pub fn raking() -> Self {
        Self::with_common_lambda(1, f64::INFINITY)
    }

    /// Orders `1..=max_order` with a common penalty on orders `>= 2`.
    pub fn with_common_lambda(max_order: usize, lambda: f64) -> Self {
        Self {
            max_order,
            lambda: vec![lambda; max_order.saturating_sub(1)],
            bounds: (0.0, f64::INFINITY),
            balance_tol: 1e-8,
            grad_tol: 1e-8,
            max_iterations: 5000,
        }
    }

    /// Penalty for an order (`1..=max_order`).
    pub fn lambda_for_order(&self, order: usize) -> f64 {
        if order <= 1 {
            0.0
        } else {
            self.lambda[order - 2]
        }
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.bounds = (lower, upper);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_order < 1 {
            return Err(Error::Config("max_order must be at least 1".into()));
        }
        if self.lambda.len() + 1 != self.max_order && !(self.max_order == 1 && self.lambda.is_empty()) {
            return Err(Error::Config(format!(
                "expected {} penalties for orders 2..={}, got {}",
                self.max_order - 1,
                self.max_order,
                self.lambda.len()
            )));
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if l.is_nan() || l < 0.0 {
                return Err(Error::Config(format!(
                    "lambda for order {} must be nonnegative, got {}",
                    i + 2,
                    l
                )));
            }
        }
        let (lo, hi) = self.bounds;
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::Config(format!("bounds must satisfy L < U, got ({}, {})", lo, hi)));
        }
        if !(self.balance_tol > 0.0 && self.grad_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Convergence state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted; the best iterate is returned.
    MaxIterations,
}

impl SolveStatus {
    pub fn is_converged(self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}

/// Dual variables, stacked over the orders that enter the program.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub beta: Vec<f64>,
    /// Orders represented in `beta` (always starts with 1).
    pub included_orders: Vec<usize>,
    /// Slice of `beta` per included order.
    pub block_ranges: Vec<Range<usize>>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Dual objective value at `beta`.
    pub value: f64,
    pub status: SolveStatus,
}

impl DualSolution {
    /// Dual block for an order, empty when the order was dropped.
    pub fn block(&self, order: usize) -> &[f64] {
        match self.included_orders.iter().position(|&k| k == order) {
            Some(i) => &self.beta[self.block_ranges[i].clone()],
            None => &[],
        }
    }
}

/// Solved cell weights with diagnostics.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    /// Per-cell weight, zero outside the respondent support.
    pub gamma: Vec<f64>,
    /// Cells with at least one respondent.
    pub support: Vec<usize>,
    pub dual: Option<DualSolution>,
    /// Per-order imbalance `||D^(k)' (diag(n) gamma - N^P)||_2` on the count
    /// scale, for every order built in the design.
    pub imbalance_by_order: Vec<f64>,
    /// `sum_s n_s gamma(s)`.
    pub sum_weights: f64,
    /// `sum_s n_s gamma(s)^2`.
    pub sum_sq_weights: f64,
    pub n_eff: f64,
    /// Primal objective of the calibration program at `gamma`.
    pub primal_objective: f64,
    pub status: SolveStatus,
}

impl WeightSolution {
    /// Total higher-order imbalance `sum_{k>=2} ||.||_2^2` (count scale).
    pub fn higher_order_imbalance_sq(&self) -> f64 {
        self.imbalance_by_order
            .iter()
            .skip(1)
            .map(|v| v * v)
            .sum()
    }

    pub fn design_effect(&self, table: &CellTable) -> f64 {
        table.total_respondents() as f64 / self.n_eff
    }
}

/// Imbalance over design columns: `D' (diag(n) gamma - N^P)` for orders
/// `1..=up_to_order`, count scale.
pub(crate) fn imbalance_columns(
    design: &InteractionDesign,
    table: &CellTable,
    gamma: &[f64],
    up_to_order: usize,
) -> Result<Vec<f64>> {
    let cols_end = design.order_range(up_to_order).end;
    let mut acc = vec![KahanSum::new(); cols_end];
    for s in table.active_cells() {
        let coef = table.resp_count(s) as f64 * gamma[s] - table.pop_count(s) as f64;
        if coef == 0.0 {
            continue;
        }
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, up_to_order) {
            acc[c as usize].add(coef);
        }
    }
    Ok(acc.iter().map(KahanSum::value).collect())
}

/// Per-order l2 norms from a column imbalance vector.
pub(crate) fn per_order_norms(design: &InteractionDesign, cols: &[f64]) -> Vec<f64> {
    (1..=design.max_order())
        .map(|k| {
            let r = design.order_range(k);
            if r.end <= cols.len() {
                norm2(&cols[r])
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Pre-processed solve inputs: active cells, their sparse design rows with
/// columns remapped to the included orders, and count vectors as f64.
pub(crate) struct Problem<'a> {
    pub design: &'a InteractionDesign,
    pub table: &'a CellTable,
    pub spec: &'a CalibrationSpec,
    pub active: Vec<usize>,
    pub rows: CsrRows,
    pub n: Vec<f64>,
    pub np: Vec<f64>,
    pub n_total: f64,
    pub num_cols: usize,
    pub included_orders: Vec<usize>,
    pub order_ranges: Vec<Range<usize>>,
    /// Penalty per included order (0 = exact constraint).
    pub order_lambda: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(
        design: &'a InteractionDesign,
        table: &'a CellTable,
        spec: &'a CalibrationSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.max_order > design.max_order() {
            return Err(Error::Mismatch(format!(
                "spec wants order {} but the design was built to order {}",
                spec.max_order,
                design.max_order()
            )));
        }
        if table.schema() != design.schema() {
            return Err(Error::Mismatch("table and design schemas differ".into()));
        }
        if table.total_respondents() == 0 {
            return Err(Error::Infeasible("no respondents".into()));
        }

        let mut included_orders = Vec::new();
        let mut order_lambda = Vec::new();
        for k in 1..=spec.max_order {
            let lam = spec.lambda_for_order(k);
            if lam.is_finite() {
                included_orders.push(k);
                order_lambda.push(lam);
            }
        }

        // Remap design columns of the included orders to a compact range.
        let design_cols = design.order_range(spec.max_order).end;
        let mut remap: Vec<i64> = vec![-1; design_cols];
        let mut num_cols = 0usize;
        let mut order_ranges = Vec::with_capacity(included_orders.len());
        for &k in &included_orders {
            let r = design.order_range(k);
            order_ranges.push(num_cols..num_cols + r.len());
            for c in r {
                remap[c] = num_cols as i64;
                num_cols += 1;
            }
        }

        let active = table.active_cells();
        let mut indptr = Vec::with_capacity(active.len() + 1);
        let mut indices: Vec<u32> = Vec::new();
        indptr.push(0);
        let mut n = Vec::with_capacity(active.len());
        let mut np = Vec::with_capacity(active.len());
        for &s in &active {
            let levels = crate::design::decode_cell(design.schema(), s)?.levels;
            for c in design.cell_columns(&levels, spec.max_order) {
                let m = remap[c as usize];
                if m >= 0 {
                    indices.push(m as u32);
                }
            }
            indptr.push(indices.len());
            n.push(table.resp_count(s) as f64);
            np.push(table.pop_count(s) as f64);
        }

        Ok(Self {
            design,
            table,
            spec,
            active,
            rows: CsrRows { indptr, indices },
            n,
            np,
            n_total: table.total_population() as f64,
            num_cols,
            included_orders,
            order_ranges,
            order_lambda,
        })
    }

    /// Exact-balance feasibility: every exact column with population mass
    /// needs respondent mass. Returns the violated column label on failure.
    pub fn check_exact_feasibility(&self) -> Result<()> {
        let mut pop_tot = vec![0.0f64; self.num_cols];
        let mut resp_tot = vec![0.0f64; self.num_cols];
        for i in 0..self.active.len() {
            for &c in self.rows.row(i) {
                pop_tot[c as usize] += self.np[i];
                resp_tot[c as usize] += self.n[i];
            }
        }
        for (idx, &k) in self.included_orders.iter().enumerate() {
            if self.order_lambda[idx] > 0.0 {
                continue; // penalized order, never a hard constraint
            }
            let design_range = self.design.order_range(k);
            for (local, c) in self.order_ranges[idx].clone().enumerate() {
                if pop_tot[c] > 0.0 && resp_tot[c] == 0.0 {
                    let label = self.design.column_label(design_range.start + local);
                    return Err(Error::Infeasible(format!(
                        "margin `{}` has population mass but no respondents",
                        label
                    )));
                }
            }
        }
        Ok(())
    }

    /// `z_i = D_i . beta` per active cell.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.active.len())
            .map(|i| self.rows.row(i).iter().map(|&c| beta[c as usize]).sum())
            .collect()
    }

    /// Dual objective and gradient; see [`dual_value_grad`] for the algebra.
    pub fn eval(&self, beta: &[f64], grad: &mut [f64]) -> Result<f64> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Estimation("non-finite dual variables".into()));
        }
        debug_assert_eq!(beta.len(), self.num_cols);
        debug_assert_eq!(grad.len(), self.num_cols);
        let (lo, hi) = self.spec.bounds;
        grad.fill(0.0);
        let mut val = KahanSum::new();
        for i in 0..self.active.len() {
            let row = self.rows.row(i);
            let z: f64 = row.iter().map(|&c| beta[c as usize]).sum();
            let c = clip(z, lo, hi);
            let ni = self.n[i];
            let npi = self.np[i];
            if ni > 0.0 {
                val.add(ni * (c * z - 0.5 * c * c));
            }
            if npi > 0.0 {
                val.add(-npi * z);
            }
            let coef = (ni * c - npi) / self.n_total;
            if coef != 0.0 {
                for &cc in row {
                    grad[cc as usize] += coef;
                }
            }
        }
        let mut v = val.value() / self.n_total;
        for (idx, r) in self.order_ranges.iter().enumerate() {
            let lam = self.order_lambda[idx];
            if lam > 0.0 {
                v += 0.5 * lam * ksum(beta[r.clone()].iter().map(|b| b * b));
                for c in r.clone() {
                    grad[c] += lam * beta[c];
                }
            }
        }
        Ok(v)
    }

    /// Infinity norm of the exact-constraint residual (count scale), read off
    /// the gradient: exact blocks carry no penalty term, so their gradient
    /// entries are residual / N.
    pub fn exact_residual_inf(&self, grad: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (idx, r) in self.order_ranges.iter().enumerate() {
            if self.order_lambda[idx] == 0.0 {
                for c in r.clone() {
                    worst = worst.max(grad[c].abs());
                }
            }
        }
        worst * self.n_total
    }

    /// Primal objective at weights `gamma` (indexed by cell), using the same
    /// normalization the dual bounds: gap = primal + dual -> 0 at optimum.
    pub fn primal_objective(&self, gamma: &[f64]) -> Result<f64> {
        let imb = imbalance_columns(self.design, self.table, gamma, self.spec.max_order)?;
        let mut v = KahanSum::new();
        for (idx, &k) in self.included_orders.iter().enumerate() {
            let lam = self.order_lambda[idx];
            if lam > 0.0 {
                let r = self.design.order_range(k);
                let ss = ksum(imb[r].iter().map(|x| x * x));
                v.add(ss / (2.0 * self.n_total * self.n_total * lam));
            }
        }
        let wsq = ksum(
            self.table
                .support_cells()
                .map(|s| self.table.resp_count(s) as f64 * gamma[s] * gamma[s]),
        );
        v.add(wsq / (2.0 * self.n_total));
        Ok(v.value())
    }
}

/// Recover primal weights from a dual solution and attach diagnostics.
pub fn recover_primal(
    dual: &DualSolution,
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<WeightSolution> {
    let problem = Problem::new(design, table, spec)?;
    recover_primal_prepared(&problem, dual)
}

pub(crate) fn recover_primal_prepared(
    problem: &Problem<'_>,
    dual: &DualSolution,
) -> Result<WeightSolution> {
    let (lo, hi) = problem.spec.bounds;
    let z = problem.linear_predictor(&dual.beta);
    let mut gamma = vec![0.0; problem.table.num_cells()];
    let mut support = Vec::new();
    for (i, &s) in problem.active.iter().enumerate() {
        if problem.n[i] > 0.0 {
            gamma[s] = clip(z[i], lo, hi);
            support.push(s);
        }
    }
    finish_solution(problem, gamma, support, Some(dual.clone()), dual.status)
}

pub(crate) fn finish_solution(
    problem: &Problem<'_>,
    gamma: Vec<f64>,
    support: Vec<usize>,
    dual: Option<DualSolution>,
    status: SolveStatus,
) -> Result<WeightSolution> {
    let design = problem.design;
    let table = problem.table;
    let imb_cols = imbalance_columns(design, table, &gamma, design.max_order())?;
    let imbalance_by_order = per_order_norms(design, &imb_cols);
    let sum_weights = ksum(support.iter().map(|&s| table.resp_count(s) as f64 * gamma[s]));
    let sum_sq_weights = ksum(
        support
            .iter()
            .map(|&s| table.resp_count(s) as f64 * gamma[s] * gamma[s]),
    );
    let n_eff = if sum_sq_weights > 0.0 {
        sum_weights * sum_weights / sum_sq_weights
    } else {
        0.0
    };
    let primal_objective = problem.primal_objective(&gamma)?;
    Ok(WeightSolution {
        gamma,
        support,
        dual,
        imbalance_by_order,
        sum_weights,
        sum_sq_weights,
        n_eff,
        primal_objective,
        status,
    })
}

/// Build a [`WeightSolution`] around externally constructed weights (e.g.
/// post-stratification ratios), attaching the standard diagnostics.
pub fn finish_solution_public(
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
    gamma: Vec<f64>,
    support: Vec<usize>,
    status: SolveStatus,
) -> Result<WeightSolution> {
    let problem = Problem::new(design, table, spec)?;
    finish_solution(&problem, gamma, support, None, status)
}

/// Imbalance over design columns, `D' (diag(n) gamma - N^P)`, count scale.
pub fn imbalance_columns_public(
    design: &InteractionDesign,
    table: &CellTable,
    gamma: &[f64],
    up_to_order: usize,
) -> Result<Vec<f64>> {
    imbalance_columns(design, table, gamma, up_to_order)
}

/// Solve the calibration program end to end: dual solve plus primal recovery.
pub fn solve(
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<WeightSolution> {
    let problem = Problem::new(design, table, spec)?;
    problem.check_exact_feasibility()?;
    let dual = dual::solve_dual_prepared(&problem, None)?;
    recover_primal_prepared(&problem, &dual)
}

/// Solve with a warm-started dual vector (used by penalty sweeps).
pub fn solve_warm(
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
    warm: Option<&DualSolution>,
) -> Result<WeightSolution> {
    let problem = Problem::new(design, table, spec)?;
    problem.check_exact_feasibility()?;
    let dual = dual::solve_dual_prepared(&problem, warm)?;
    recover_primal_prepared(&problem, &dual)
}

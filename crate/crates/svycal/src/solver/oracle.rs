//! Independent reference solvers for small instances.
//!
//! These attack the calibration program on the primal side and exist so the
//! dual path can be checked against something that shares none of its code:
//!
//! * [`brute_force_primal`] runs long projected first-order descent on the
//!   weights themselves, with equality constraints eliminated through a
//!   null-space projector and the box handled by Dykstra's alternating
//!   projections, then validates an exact active-set KKT solve.
//! * [`ipf_raking`] is cyclic per-margin fitting in the `diag(n)` metric
//!   started from zero, which converges to the minimum-`sum n gamma^2`
//!   raking weights of the first-order program.

use super::{finish_solution, CalibrationSpec, Problem, SolveStatus, WeightSolution};
use crate::design::{CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::util::{clip, norm_inf};
use nalgebra::{DMatrix, DVector};

const MAX_SUPPORT: usize = 200;

/// Solve the calibration program directly in weight space. Only intended for
/// instances with at most 200 support cells.
pub fn brute_force_primal(
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<WeightSolution> {
    let problem = Problem::new(design, table, spec)?;
    problem.check_exact_feasibility()?;
    let support: Vec<usize> = table.support_cells().collect();
    if support.len() > MAX_SUPPORT {
        return Err(Error::Config(format!(
            "brute-force primal is limited to {} support cells, got {}",
            MAX_SUPPORT,
            support.len()
        )));
    }
    let qp = PrimalQp::build(&problem, &support)?;
    let x = qp.solve()?;

    let mut gamma = vec![0.0; table.num_cells()];
    for (i, &s) in support.iter().enumerate() {
        gamma[s] = x[i];
    }
    finish_solution(&problem, gamma, support, None, SolveStatus::Converged)
}

/// Raking weights for the first-order program: cyclic projections onto each
/// margin hyperplane (and the box) in the `diag(n)` metric, starting from
/// zero, run to tolerance 1e-10. The fixed point is the projection of 0 onto
/// the feasible set, i.e. the minimum-variance weights that exactly balance
/// first-order margins. Returns per-cell weights (zero off support).
pub fn ipf_raking(
    design: &InteractionDesign,
    table: &CellTable,
    bounds: (f64, f64),
) -> Result<Vec<f64>> {
    let support: Vec<usize> = table.support_cells().collect();
    if support.is_empty() {
        return Err(Error::Infeasible("no respondents".into()));
    }
    let n: Vec<f64> = support.iter().map(|&s| table.resp_count(s) as f64).collect();
    let n_total = table.total_population() as f64;

    // Margin membership lists over support cells, plus count-scale targets.
    let m1 = design.order_range(1).end;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m1];
    let mut targets = vec![0.0f64; m1];
    for (i, &s) in support.iter().enumerate() {
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, 1) {
            members[c as usize].push(i);
        }
    }
    for s in table.populated_cells() {
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, 1) {
            targets[c as usize] += table.pop_count(s) as f64;
        }
    }
    for c in 0..m1 {
        let mass: f64 = members[c].iter().map(|&i| n[i]).sum();
        if mass == 0.0 && targets[c] != 0.0 {
            return Err(Error::Infeasible(format!(
                "margin `{}` has population mass but no respondents",
                design.column_label(c)
            )));
        }
    }

    let (lo, hi) = bounds;
    let tol = 1e-10 * n_total.max(1.0);
    let mut x = vec![0.0f64; support.len()];
    let mut box_corr = vec![0.0f64; support.len()];
    for _sweep in 0..200_000 {
        let mut worst = 0.0f64;
        // Hyperplane passes: shift member cells by a common amount (the
        // diag(n)-metric projection onto the margin constraint).
        for c in 0..m1 {
            let mass: f64 = members[c].iter().map(|&i| n[i]).sum();
            if mass == 0.0 {
                continue;
            }
            let cur: f64 = members[c].iter().map(|&i| n[i] * x[i]).sum();
            let shift = (targets[c] - cur) / mass;
            for &i in &members[c] {
                x[i] += shift;
            }
            worst = worst.max(shift.abs() * mass);
        }
        // Box pass with Dykstra correction (the margins are affine and need
        // none).
        let mut moved = 0.0f64;
        for i in 0..x.len() {
            let y = x[i] + box_corr[i];
            let proj = clip(y, lo, hi);
            box_corr[i] = y - proj;
            moved = moved.max((proj - x[i]).abs());
            x[i] = proj;
        }
        if worst <= tol && moved <= 1e-12 * (1.0 + norm_inf(&x)) {
            let mut gamma = vec![0.0; table.num_cells()];
            for (i, &s) in support.iter().enumerate() {
                gamma[s] = x[i];
            }
            return Ok(gamma);
        }
    }
    Err(Error::NotConverged("raking projections exhausted their sweep budget".into()))
}

/// Dense quadratic data for the primal program over support cells:
/// f(x) = 0.5 x'Hx + g0'x + const, A x = b, L <= x <= U.
struct PrimalQp {
    h: DMatrix<f64>,
    g0: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// Null-space projector of A (I - A^+ A) and a particular solution.
    null_proj: DMatrix<f64>,
    particular: DVector<f64>,
    lo: f64,
    hi: f64,
    lipschitz: f64,
}

impl PrimalQp {
    fn build(problem: &Problem<'_>, support: &[usize]) -> Result<Self> {
        let design = problem.design;
        let table = problem.table;
        let spec = problem.spec;
        let nsup = support.len();
        let n_total = problem.n_total;
        let n: Vec<f64> = support.iter().map(|&s| table.resp_count(s) as f64).collect();

        // Penalized and exact design columns (design indexing, orders <= K).
        let mut pen_cols = Vec::new();
        let mut pen_lambda = Vec::new();
        let mut exact_cols = Vec::new();
        for k in 1..=spec.max_order {
            let lam = spec.lambda_for_order(k);
            if !lam.is_finite() {
                continue;
            }
            for c in design.order_range(k) {
                if lam == 0.0 {
                    exact_cols.push(c);
                } else {
                    pen_cols.push(c);
                    pen_lambda.push(lam);
                }
            }
        }

        // Column totals over all active cells (for targets and constants).
        let cols_end = design.order_range(spec.max_order).end;
        let mut pop_tot = vec![0.0f64; cols_end];
        for s in table.populated_cells() {
            let levels = crate::design::decode_cell(design.schema(), s)?.levels;
            for c in design.cell_columns(&levels, spec.max_order) {
                pop_tot[c as usize] += table.pop_count(s) as f64;
            }
        }

        // Dense design over support cells (columns up to K).
        let mut d_sup = DMatrix::zeros(nsup, cols_end);
        for (i, &s) in support.iter().enumerate() {
            let levels = crate::design::decode_cell(design.schema(), s)?.levels;
            for c in design.cell_columns(&levels, spec.max_order) {
                d_sup[(i, c as usize)] = 1.0;
            }
        }

        // Quadratic pieces. With r_c(x) = sum_i n_i D_ic x_i - pop_tot_c,
        // f = sum_pen r_c^2 / (2 N^2 lam_c) + sum_i n_i x_i^2 / (2N).
        let mut h = DMatrix::zeros(nsup, nsup);
        let mut g0 = DVector::zeros(nsup);
        for (pc, &c) in pen_cols.iter().enumerate() {
            let w = 1.0 / (n_total * n_total * pen_lambda[pc]);
            // v_i = n_i D_ic
            for i in 0..nsup {
                let vi = n[i] * d_sup[(i, c)];
                if vi == 0.0 {
                    continue;
                }
                g0[i] -= w * pop_tot[c] * vi;
                for j in 0..nsup {
                    let vj = n[j] * d_sup[(j, c)];
                    if vj != 0.0 {
                        h[(i, j)] += w * vi * vj;
                    }
                }
            }
        }
        for i in 0..nsup {
            h[(i, i)] += n[i] / n_total;
        }

        // Equality rows: exact columns with any mass on either side.
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for &c in &exact_cols {
            let arow: Vec<f64> = (0..nsup).map(|i| n[i] * d_sup[(i, c)]).collect();
            let live = arow.iter().any(|&v| v != 0.0);
            if !live {
                if pop_tot[c] != 0.0 {
                    return Err(Error::Infeasible(format!(
                        "margin `{}` has population mass but no respondents",
                        design.column_label(c)
                    )));
                }
                continue;
            }
            rows.push(arow);
            rhs.push(pop_tot[c]);
        }
        let nrows = rows.len();
        let a = DMatrix::from_fn(nrows, nsup, |r, c| rows[r][c]);
        let b = DVector::from_vec(rhs);

        // Null-space projector and particular solution via SVD pseudoinverse.
        let svd = a.clone().svd(true, true);
        let pinv = svd
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Estimation(format!("svd failed: {}", e)))?;
        let particular = &pinv * &b;
        let residual = &a * &particular - &b;
        if residual.amax() > 1e-6 * (1.0 + b.amax()) {
            return Err(Error::Infeasible(
                "exact constraints are mutually inconsistent".into(),
            ));
        }
        let null_proj = DMatrix::identity(nsup, nsup) - &pinv * &a;

        // Lipschitz constant of grad f by power iteration on H.
        let mut v = DVector::from_element(nsup, 1.0 / (nsup as f64).sqrt());
        let mut lipschitz = 1.0;
        for _ in 0..200 {
            let hv = &h * &v;
            let norm = hv.norm();
            if norm == 0.0 {
                break;
            }
            lipschitz = norm;
            v = hv / norm;
        }

        let (lo, hi) = spec.bounds;
        Ok(Self {
            h,
            g0,
            a,
            b,
            null_proj,
            particular,
            lo,
            hi,
            lipschitz,
        })
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.g0
    }

    /// Projection onto {Ax = b} through the null-space parameterization:
    /// x -> particular + P_null (x - particular).
    fn project_affine(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.a.nrows() == 0 {
            return x.clone();
        }
        &self.particular + &self.null_proj * (x - &self.particular)
    }

    /// Dykstra alternating projections onto {Ax = b} and the box.
    fn project_feasible(&self, x0: &DVector<f64>) -> DVector<f64> {
        let mut x = x0.clone();
        let mut q = DVector::zeros(x.len());
        for _ in 0..20_000 {
            let y = self.project_affine(&x);
            let mut moved = 0.0f64;
            let corrected = &y + &q;
            let mut z = corrected.clone();
            for i in 0..z.len() {
                z[i] = clip(corrected[i], self.lo, self.hi);
            }
            q = corrected - &z;
            for i in 0..z.len() {
                moved = moved.max((z[i] - x[i]).abs());
            }
            let eq_res = if self.a.nrows() > 0 {
                (&self.a * &z - &self.b).amax()
            } else {
                0.0
            };
            x = z;
            if moved <= 1e-13 * (1.0 + x.amax()) && eq_res <= 1e-9 * (1.0 + self.b.amax()) {
                break;
            }
        }
        x
    }

    fn solve(&self) -> Result<DVector<f64>> {
        let nsup = self.g0.len();
        let step = 1.0 / (self.lipschitz * 1.01);
        let mut x = self.project_feasible(&DVector::from_element(nsup, 1.0));
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut stable = 0usize;
        for iter in 0..200_000 {
            let g = self.grad(&y);
            let x_new = self.project_feasible(&(&y - step * &g));
            // Gradient-based adaptive restart.
            let diff = &x_new - &x;
            if (&y - &x_new).dot(&diff) > 0.0 {
                t = 1.0;
                y = x.clone();
                continue;
            }
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_new + ((t - 1.0) / t_new) * &diff;
            let step_size = diff.amax();
            x = x_new;
            t = t_new;
            if step_size <= 1e-12 * (1.0 + x.amax()) {
                stable += 1;
                if stable >= 5 {
                    break;
                }
            } else {
                stable = 0;
            }
            // Periodically try the exact active-set polish.
            if iter % 250 == 249 || stable >= 5 {
                if let Some(exact) = self.active_set_polish(&x) {
                    return Ok(exact);
                }
            }
        }
        if let Some(exact) = self.active_set_polish(&x) {
            return Ok(exact);
        }
        // Certify the first-order point: projected fixed-point residual.
        let g = self.grad(&x);
        let fp = self.project_feasible(&(&x - step * &g));
        if (&fp - &x).amax() <= 1e-8 * (1.0 + x.amax()) {
            return Ok(x);
        }
        Err(Error::NotConverged("primal descent did not reach tolerance".into()))
    }

    /// Exact KKT solve for the active set suggested by `x`; returns the
    /// polished point only when it verifies feasibility and multiplier signs.
    fn active_set_polish(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let nsup = x.len();
        let tol = 1e-7 * (1.0 + x.amax());
        let mut at_lo = Vec::new();
        let mut at_hi = Vec::new();
        let mut free = Vec::new();
        for i in 0..nsup {
            if self.lo.is_finite() && x[i] - self.lo <= tol {
                at_lo.push(i);
            } else if self.hi.is_finite() && self.hi - x[i] <= tol {
                at_hi.push(i);
            } else {
                free.push(i);
            }
        }
        let nf = free.len();
        let na = self.a.nrows();
        // Assemble [H_FF A_F'; A_F 0] [x_F; nu] = [-g0_F - H_FB x_B; b - A_B x_B]
        let mut kkt = DMatrix::zeros(nf + na, nf + na);
        let mut rhs = DVector::zeros(nf + na);
        let mut xb = DVector::zeros(nsup);
        for &i in &at_lo {
            xb[i] = self.lo;
        }
        for &i in &at_hi {
            xb[i] = self.hi;
        }
        for (fi, &i) in free.iter().enumerate() {
            rhs[fi] = -self.g0[i];
            for j in 0..nsup {
                if let Some(fj) = free.iter().position(|&k| k == j) {
                    kkt[(fi, fj)] = self.h[(i, j)];
                } else {
                    rhs[fi] -= self.h[(i, j)] * xb[j];
                }
            }
            for r in 0..na {
                kkt[(fi, nf + r)] = self.a[(r, i)];
                kkt[(nf + r, fi)] = self.a[(r, i)];
            }
        }
        for r in 0..na {
            rhs[nf + r] = self.b[r];
            for i in 0..nsup {
                if !free.contains(&i) {
                    rhs[nf + r] -= self.a[(r, i)] * xb[i];
                }
            }
        }
        let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
        let mut cand = xb;
        for (fi, &i) in free.iter().enumerate() {
            cand[i] = sol[fi];
        }
        let nu = DVector::from_fn(na, |r, _| sol[nf + r]);

        // Verify: box on free vars, equality feasibility, stationarity signs.
        for &i in &free {
            if cand[i] < self.lo - 1e-9 || cand[i] > self.hi + 1e-9 {
                return None;
            }
        }
        if na > 0 && (&self.a * &cand - &self.b).amax() > 1e-8 * (1.0 + self.b.amax()) {
            return None;
        }
        let station = self.grad(&cand) + self.a.transpose() * &nu;
        let scale = 1.0 + station.amax();
        for (fi, &i) in free.iter().enumerate() {
            let _ = fi;
            if station[i].abs() > 1e-8 * scale {
                return None;
            }
        }
        for &i in &at_lo {
            if station[i] < -1e-9 * scale {
                return None;
            }
        }
        for &i in &at_hi {
            if station[i] > 1e-9 * scale {
                return None;
            }
        }
        Some(cand)
    }
}

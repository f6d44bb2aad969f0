//! Optimality certification for solved instances.

use super::{CalibrationSpec, Problem, WeightSolution};
use crate::design::{CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::util::norm2;

/// Stationarity check for one interaction order.
#[derive(Debug, Clone)]
pub struct KktOrderRow {
    pub order: usize,
    /// `(1/N) ||D^(k)' (diag(n) gamma - N^P)||_2`.
    pub imbalance_norm: f64,
    /// `lambda_k ||beta^(k)||_2`.
    pub dual_norm: f64,
    /// Absolute difference of the two sides; zero identically for orders
    /// dropped from the objective.
    pub identity_gap: f64,
    /// True when the order was dropped (`lambda = +inf`).
    pub dropped: bool,
}

#[derive(Debug, Clone)]
pub struct KktReport {
    pub rows: Vec<KktOrderRow>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `primal + q(beta)`; nonnegative, vanishing at the optimum.
    pub duality_gap: f64,
}

/// Report the per-order stationarity identity and the duality gap. At the
/// dual optimum the clip link makes the identity exact for every penalized
/// order, active box constraints included.
pub fn kkt_report(
    solution: &WeightSolution,
    design: &InteractionDesign,
    table: &CellTable,
    spec: &CalibrationSpec,
) -> Result<KktReport> {
    let dual = solution
        .dual
        .as_ref()
        .ok_or_else(|| Error::Estimation("solution carries no dual variables".into()))?;
    let problem = Problem::new(design, table, spec)?;
    let n_total = problem.n_total;

    let mut rows = Vec::new();
    for k in 2..=spec.max_order {
        let lam = spec.lambda_for_order(k);
        if !lam.is_finite() {
            rows.push(KktOrderRow {
                order: k,
                imbalance_norm: 0.0,
                dual_norm: 0.0,
                identity_gap: 0.0,
                dropped: true,
            });
            continue;
        }
        let imbalance_norm = solution.imbalance_by_order[k - 1] / n_total;
        let dual_norm = lam * norm2(dual.block(k));
        rows.push(KktOrderRow {
            order: k,
            imbalance_norm,
            dual_norm,
            identity_gap: (imbalance_norm - dual_norm).abs(),
            dropped: false,
        });
    }

    let mut grad = vec![0.0; problem.num_cols];
    let dual_objective = problem.eval(&dual.beta, &mut grad)?;
    let primal_objective = solution.primal_objective;
    Ok(KktReport {
        rows,
        primal_objective,
        dual_objective,
        duality_gap: primal_objective + dual_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, tabulate, CovariateSchema, MicroRow};
    use crate::solver::{oracle::brute_force_primal, solve};

    #[test]
    fn stationarity_identity_and_gap_on_a_random_instance() {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let mut rows = Vec::new();
        let counts = [(0, 0, 14, 4), (0, 1, 9, 1), (0, 2, 12, 2), (1, 0, 7, 2), (1, 1, 16, 3), (1, 2, 10, 1)];
        for &(a, b, pop, resp) in &counts {
            for i in 0..pop {
                rows.push(MicroRow { levels: vec![a, b], respondent: i < resp, outcome: None });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let spec = CalibrationSpec::with_common_lambda(2, 0.5);
        let sol = solve(&design, &table, &spec).unwrap();
        let report = kkt_report(&sol, &design, &table, &spec).unwrap();
        for row in &report.rows {
            assert!(row.identity_gap <= 1e-6, "order {}: {}", row.order, row.identity_gap);
        }
        let brute = brute_force_primal(&design, &table, &spec).unwrap();
        assert!(report.duality_gap.abs() <= 1e-6 * (1.0 + brute.primal_objective.abs()));
    }

    #[test]
    fn dropped_orders_report_trivial_identity() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let mut rows = Vec::new();
        let counts = [(0, 0, 8, 2), (0, 1, 6, 1), (1, 0, 7, 3), (1, 1, 9, 2)];
        for &(a, b, pop, resp) in &counts {
            for i in 0..pop {
                rows.push(MicroRow { levels: vec![a, b], respondent: i < resp, outcome: None });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let spec = CalibrationSpec::with_common_lambda(2, f64::INFINITY);
        let sol = solve(&design, &table, &spec).unwrap();
        let report = kkt_report(&sol, &design, &table, &spec).unwrap();
        assert!(report.rows[0].dropped);
        assert_eq!(report.rows[0].identity_gap, 0.0);
    }
}

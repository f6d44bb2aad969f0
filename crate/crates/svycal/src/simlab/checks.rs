//! Empirical checks of the theoretical guarantees.

use super::population::Population;
use crate::design::{CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::solver::solve_unregularized;
use crate::util::{ksum, norm2};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of the balance-bound check for one respondent draw.
#[derive(Debug, Clone)]
pub struct Lemma1Draw {
    /// `||diag(n) gamma - N^P||_2` at the unregularized solution.
    pub lhs: f64,
    /// `kappa * ||diag(n) (1/pi) - N^P||_2`.
    pub rhs: f64,
    pub violated: bool,
}

#[derive(Debug, Clone)]
pub struct Lemma1Report {
    pub draws: Vec<Lemma1Draw>,
    pub violations: usize,
    pub condition_number: f64,
    /// Largest lhs/rhs ratio observed (1 would be tight).
    pub max_ratio: f64,
}

/// Check, over independent respondent draws on the base population, that the
/// unregularized balance solution is within the condition-number bound of
/// the inverse-propensity balance. A violation would indicate a solver bug.
pub fn lemma1_check(
    population: &Population,
    pi: &[f64],
    design: &InteractionDesign,
    draws: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if design.max_order() != population.schema.num_covariates() {
        return Err(Error::Config(
            "the balance bound needs the full-order design".into(),
        ));
    }
    let kappa = crate::design::design_diagnostics(design)?.condition_number;
    let j = population.schema.num_cells();
    let mut pop_counts = vec![0u64; j];
    for &c in &population.cells {
        pop_counts[c as usize] += 1;
    }

    let mut report = Lemma1Report {
        draws: Vec::with_capacity(draws),
        violations: 0,
        condition_number: kappa,
        max_ratio: 0.0,
    };
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64 + 1);
        let mut resp_counts = vec![0u64; j];
        for &c in &population.cells {
            if rng.gen::<f64>() < pi[c as usize] {
                resp_counts[c as usize] += 1;
            }
        }
        let table = CellTable::from_counts(
            population.schema.clone(),
            pop_counts.clone(),
            resp_counts.clone(),
        )?;
        let sol = solve_unregularized(design, &table)?;
        let lhs = norm2(
            &(0..j)
                .map(|s| resp_counts[s] as f64 * sol.weights.gamma[s] - pop_counts[s] as f64)
                .collect::<Vec<_>>(),
        );
        let rhs = kappa
            * norm2(
                &(0..j)
                    .map(|s| resp_counts[s] as f64 / pi[s] - pop_counts[s] as f64)
                    .collect::<Vec<_>>(),
            );
        let violated = lhs > rhs * (1.0 + 1e-12);
        if violated {
            report.violations += 1;
        }
        if rhs > 0.0 {
            report.max_ratio = report.max_ratio.max(lhs / rhs);
        }
        report.draws.push(Lemma1Draw { lhs, rhs, violated });
    }
    Ok(report)
}

/// Least-squares regression of the population outcomes on the interaction
/// features (only possible in simulation, where all outcomes are known):
/// weighted by cell population counts with realized cell means as targets.
/// Solved by SVD, so rank-deficient (truncated or sparse) designs get the
/// minimum-norm coefficients.
pub fn population_regression(
    population: &Population,
    design: &InteractionDesign,
) -> Result<Vec<f64>> {
    let j = population.schema.num_cells();
    let m = design.order_range(design.max_order()).end;
    if j > 4096 {
        return Err(Error::Config(
            "population regression is dense; limited to J <= 4096".into(),
        ));
    }
    let mut pop_counts = vec![0u64; j];
    for &c in &population.cells {
        pop_counts[c as usize] += 1;
    }
    let dense = design.assemble_dense()?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in 0..j {
        if pop_counts[s] > 0 {
            let w = (pop_counts[s] as f64).sqrt();
            rows.push((s, w));
            targets.push(w * population.true_cell_means[s]);
        }
    }
    let a = DMatrix::from_fn(rows.len(), m, |r, c| rows[r].1 * dense[(rows[r].0, c)]);
    let b = DVector::from_vec(targets);
    let eta = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Estimation(format!("svd solve failed: {}", e)))?;
    Ok(eta.as_slice().to_vec())
}

/// Per-order l2 norms of a coefficient vector over the design's blocks.
pub fn coefficient_order_norms(design: &InteractionDesign, eta: &[f64]) -> Vec<f64> {
    (1..=design.max_order())
        .map(|k| {
            let r = design.order_range(k);
            norm2(&eta[r])
        })
        .collect()
}

/// Mean-squared prediction error of coefficients against realized cell
/// means, population-weighted. Zero for a saturated fit.
pub fn regression_fit_error(
    population: &Population,
    design: &InteractionDesign,
    eta: &[f64],
) -> Result<f64> {
    let j = population.schema.num_cells();
    let mut pop_counts = vec![0u64; j];
    for &c in &population.cells {
        pop_counts[c as usize] += 1;
    }
    let mut total = 0.0;
    let mut err = Vec::new();
    for s in 0..j {
        if pop_counts[s] == 0 {
            continue;
        }
        let levels = crate::design::decode_cell(&population.schema, s)?.levels;
        let pred: f64 = design
            .cell_columns(&levels, design.max_order())
            .iter()
            .map(|&c| eta[c as usize])
            .sum();
        let w = pop_counts[s] as f64;
        err.push(w * (pred - population.true_cell_means[s]).powi(2));
        total += w;
    }
    Ok(ksum(err) / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, CovariateSchema};
    use crate::simlab::population::{
        gen_population, CellDistribution, CoeffSpec, OutcomeSpec,
    };
    use approx::assert_relative_eq;

    #[test]
    fn census_draw_is_tight_at_zero() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let pop = gen_population(
            &schema,
            200,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::Constant { value: 1.0 },
            &design,
            4,
        )
        .unwrap();
        let pi = vec![1.0; 4];
        let rep = lemma1_check(&pop, &pi, &design, 3, 8).unwrap();
        assert_eq!(rep.violations, 0);
        for d in &rep.draws {
            assert!(d.lhs < 1e-6, "{}", d.lhs);
        }
    }

    #[test]
    fn bound_holds_on_random_draws() {
        let schema = CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap();
        let design = build_design(&schema, 3).unwrap();
        let pop = gen_population(
            &schema,
            3000,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::Constant { value: 0.0 },
            &design,
            12,
        )
        .unwrap();
        let pi: Vec<f64> = (0..24).map(|s| 0.05 + 0.02 * (s % 5) as f64).collect();
        let rep = lemma1_check(&pop, &pi, &design, 10, 3).unwrap();
        assert_eq!(rep.violations, 0, "max ratio {}", rep.max_ratio);
    }

    #[test]
    fn first_order_outcomes_have_no_higher_order_coefficients() {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let pop = gen_population(
            &schema,
            3000,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::LinearNormal {
                coeffs: CoeffSpec {
                    intercept: 0.3,
                    max_order: 1,
                    scale_by_order: vec![0.8],
                    seed: 5,
                },
                noise_sd: 0.0,
            },
            &design,
            2,
        )
        .unwrap();
        let eta = population_regression(&pop, &design).unwrap();
        let norms = coefficient_order_norms(&design, &eta);
        assert!(norms[1] < 1e-8, "{:?}", norms);
    }

    #[test]
    fn saturated_regression_reproduces_cell_means() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let pop = gen_population(
            &schema,
            400,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::LinearNormal {
                coeffs: CoeffSpec {
                    intercept: 0.1,
                    max_order: 2,
                    scale_by_order: vec![0.5, 0.5],
                    seed: 9,
                },
                noise_sd: 0.7,
            },
            &design,
            31,
        )
        .unwrap();
        let eta = population_regression(&pop, &design).unwrap();
        let err = regression_fit_error(&pop, &design, &eta).unwrap();
        assert_relative_eq!(err, 0.0, epsilon = 1e-16);
    }
}

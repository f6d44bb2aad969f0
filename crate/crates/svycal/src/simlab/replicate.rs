//! Replication engine: resample the population, draw response, run every
//! estimator, and aggregate bias / RMSE / CI coverage.
//!
//! Replications run in parallel with per-replication seeds derived from the
//! master seed (ChaCha streams), and aggregation walks the results in
//! replication order with compensated summation, so a run is bitwise
//! reproducible regardless of thread scheduling.

use super::population::Population;
use crate::design::{build_design, CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::estimators::{
    self, drp_with_ci, mrp_estimate, poststrat_weights, weighting_with_ci, MethodTag,
};
use crate::outcomes::{fit_bagged_trees, fit_map_linear, fit_ridge, OutcomeModel, PriorCovariance, SmootherSpec};
use crate::solver::{self, CalibrationSpec, WeightSolution};
use crate::util::{ksum, KahanSum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Weighting method inside an estimator definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsMethod {
    Raking,
    Multilevel {
        max_order: usize,
        /// Penalties for orders `2..=max_order`.
        lambda: Vec<f64>,
    },
    Poststrat,
}

impl WeightsMethod {
    fn key(&self) -> String {
        format!("{:?}", self)
    }

    fn max_order(&self) -> usize {
        match self {
            WeightsMethod::Multilevel { max_order, .. } => *max_order,
            _ => 1,
        }
    }
}

/// Outcome-model method inside an estimator definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMethod {
    Ridge { order: usize, penalty: f64 },
    MapLinear { order: usize, q: Vec<f64> },
    Trees { trees: usize, depth: usize },
    CellMeans,
    Constant { value: f64 },
}

impl ModelMethod {
    fn key(&self) -> String {
        format!("{:?}", self)
    }

    fn max_order(&self) -> usize {
        match self {
            ModelMethod::Ridge { order, .. } | ModelMethod::MapLinear { order, .. } => *order,
            _ => 1,
        }
    }
}

/// One estimator to run per replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Weighting { weights: WeightsMethod },
    Mrp { model: ModelMethod },
    Drp { weights: WeightsMethod, model: ModelMethod },
    OracleHt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: EstimatorKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSuite {
    pub estimators: Vec<EstimatorDef>,
    pub alpha: f64,
}

impl EstimatorSuite {
    pub fn max_design_order(&self) -> usize {
        let mut order = 1;
        for def in &self.estimators {
            match &def.kind {
                EstimatorKind::Weighting { weights } => order = order.max(weights.max_order()),
                EstimatorKind::Mrp { model } => order = order.max(model.max_order()),
                EstimatorKind::Drp { weights, model } => {
                    order = order.max(weights.max_order()).max(model.max_order())
                }
                EstimatorKind::OracleHt => {}
            }
        }
        order
    }
}

/// Aggregate behavior of one estimator across replications.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub bias: f64,
    pub rmse: f64,
    /// Share of replications whose CI covered the replication truth; absent
    /// for estimators without intervals.
    pub coverage: Option<f64>,
    pub mean_n_eff: Option<f64>,
    pub failures: usize,
    pub used: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub rows: Vec<EstimatorSummary>,
    pub replications: usize,
    pub seed: u64,
    /// Largest estimation-error identity residual observed in any
    /// replication (weighting and DRP decompositions).
    pub max_identity_residual: f64,
}

impl SimResult {
    pub fn row(&self, name: &str) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.name == name)
    }
}

struct RepOutcome {
    estimate: f64,
    ci: Option<(f64, f64)>,
    n_eff: Option<f64>,
}

struct RepResult {
    truth: f64,
    outcomes: Vec<Option<RepOutcome>>,
    identity_residual: f64,
}

/// Horvitz-Thompson estimate with known response probabilities.
pub fn oracle_ht(cells: &[u32], outcomes: &[f64], respondent: &[bool], pi: &[f64]) -> f64 {
    let n = cells.len() as f64;
    ksum(cells.iter().zip(outcomes).zip(respondent).map(|((&c, &y), &r)| {
        if r {
            y / pi[c as usize]
        } else {
            0.0
        }
    })) / n
}

/// Run `replications` independent resampling replications of the estimator
/// suite against a population and response table.
pub fn run_replications(
    population: &Population,
    pi: &[f64],
    suite: &EstimatorSuite,
    replications: usize,
    seed: u64,
) -> Result<SimResult> {
    if replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if pi.len() != population.schema.num_cells() {
        return Err(Error::Mismatch("response table must cover every cell".into()));
    }
    if pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Config("response probabilities must lie in (0, 1]".into()));
    }
    let design = build_design(&population.schema, suite.max_design_order())?;

    let reps: Vec<Result<RepResult>> = (0..replications)
        .into_par_iter()
        .map(|rep| run_one(population, pi, suite, &design, seed, rep as u64))
        .collect();

    aggregate(suite, reps, replications, seed)
}

fn aggregate(
    suite: &EstimatorSuite,
    reps: Vec<Result<RepResult>>,
    replications: usize,
    seed: u64,
) -> Result<SimResult> {
    let k = suite.estimators.len();
    let mut bias = vec![KahanSum::new(); k];
    let mut sq = vec![KahanSum::new(); k];
    let mut neff = vec![KahanSum::new(); k];
    let mut neff_count = vec![0usize; k];
    let mut covered = vec![0usize; k];
    let mut ci_count = vec![0usize; k];
    let mut used = vec![0usize; k];
    let mut max_identity = 0.0f64;
    for rep in reps {
        let rep = rep?;
        max_identity = max_identity.max(rep.identity_residual);
        for (i, out) in rep.outcomes.iter().enumerate() {
            if let Some(o) = out {
                used[i] += 1;
                let err = o.estimate - rep.truth;
                bias[i].add(err);
                sq[i].add(err * err);
                if let Some((lo, hi)) = o.ci {
                    ci_count[i] += 1;
                    if lo <= rep.truth && rep.truth <= hi {
                        covered[i] += 1;
                    }
                }
                if let Some(ne) = o.n_eff {
                    neff[i].add(ne);
                    neff_count[i] += 1;
                }
            }
        }
    }
    let rows = suite
        .estimators
        .iter()
        .enumerate()
        .map(|(i, def)| {
            let n_used = used[i].max(1) as f64;
            EstimatorSummary {
                name: def.name.clone(),
                bias: bias[i].value() / n_used,
                rmse: (sq[i].value() / n_used).sqrt(),
                coverage: (ci_count[i] > 0).then(|| covered[i] as f64 / ci_count[i] as f64),
                mean_n_eff: (neff_count[i] > 0).then(|| neff[i].value() / neff_count[i] as f64),
                failures: replications - used[i],
                used: used[i],
            }
        })
        .collect();
    Ok(SimResult {
        rows,
        replications,
        seed,
        max_identity_residual: max_identity,
    })
}

fn run_one(
    population: &Population,
    pi: &[f64],
    suite: &EstimatorSuite,
    design: &InteractionDesign,
    seed: u64,
    rep: u64,
) -> Result<RepResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep.wrapping_add(1));
    let n_units = population.size();
    let j = population.schema.num_cells();
    let regenerate = population.redraw_outcomes;

    // Resample units, regenerate outcomes where the DGP is stochastic, and
    // draw response flags.
    let mut cells = Vec::with_capacity(n_units);
    let mut outcomes = Vec::with_capacity(n_units);
    let mut respondent = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        let idx = rng.gen_range(0..n_units);
        let cell = population.cells[idx] as usize;
        let y = if regenerate {
            population.generator.draw(cell, &mut rng)
        } else {
            population.base_outcomes[idx]
        };
        let r = rng.gen::<f64>() < pi[cell];
        cells.push(cell as u32);
        outcomes.push(y);
        respondent.push(r);
    }

    // Tabulate the replication.
    let mut pop_counts = vec![0u64; j];
    let mut resp_counts = vec![0u64; j];
    let mut sums = vec![KahanSum::new(); j];
    let mut sumsq = vec![KahanSum::new(); j];
    let mut all_sums = vec![KahanSum::new(); j];
    for i in 0..n_units {
        let c = cells[i] as usize;
        pop_counts[c] += 1;
        all_sums[c].add(outcomes[i]);
        if respondent[i] {
            resp_counts[c] += 1;
            sums[c].add(outcomes[i]);
            sumsq[c].add(outcomes[i] * outcomes[i]);
        }
    }
    let table = CellTable::from_counts(population.schema.clone(), pop_counts.clone(), resp_counts)?
        .with_outcome_sums(
            sums.iter().map(KahanSum::value).collect(),
            Some(sumsq.iter().map(KahanSum::value).collect()),
        )?;
    let truth = ksum(outcomes.iter().copied()) / n_units as f64;
    // Realized cell means of this replication's population.
    let realized: Vec<f64> = (0..j)
        .map(|s| {
            if pop_counts[s] > 0 {
                all_sums[s].value() / pop_counts[s] as f64
            } else {
                f64::NAN
            }
        })
        .collect();

    let mut weight_cache: HashMap<String, Option<WeightSolution>> = HashMap::new();
    let mut model_cache: HashMap<String, Option<OutcomeModel>> = HashMap::new();
    let mut identity_residual = 0.0f64;

    let mut results = Vec::with_capacity(suite.estimators.len());
    for def in &suite.estimators {
        let outcome = match &def.kind {
            EstimatorKind::Weighting { weights } => {
                solve_weights(weights, design, &table, &mut weight_cache).and_then(|w| {
                    let report =
                        weighting_with_ci(&w, &table, suite.alpha, tag_of(weights), design).ok()?;
                    identity_residual = identity_residual
                        .max(weighting_identity_residual(&w, &table, &realized, report.estimate, truth));
                    Some(RepOutcome {
                        estimate: report.estimate,
                        ci: report.ci,
                        n_eff: report.n_eff,
                    })
                })
            }
            EstimatorKind::Mrp { model } => {
                fit_model(model, design, &table, seed, rep, &mut model_cache).and_then(|m| {
                    let report = mrp_estimate(&m, design, &table).ok()?;
                    Some(RepOutcome {
                        estimate: report.estimate,
                        ci: None,
                        n_eff: None,
                    })
                })
            }
            EstimatorKind::Drp { weights, model } => {
                let w = solve_weights(weights, design, &table, &mut weight_cache);
                let m = fit_model(model, design, &table, seed, rep, &mut model_cache);
                match (w, m) {
                    (Some(w), Some(m)) => drp_with_ci(&m, design, &w, &table, suite.alpha)
                        .ok()
                        .map(|report| {
                            identity_residual = identity_residual.max(drp_identity_residual(
                                &m,
                                design,
                                &w,
                                &table,
                                &realized,
                                report.estimate,
                                truth,
                            ));
                            RepOutcome {
                                estimate: report.estimate,
                                ci: report.ci,
                                n_eff: report.n_eff,
                            }
                        }),
                    _ => None,
                }
            }
            EstimatorKind::OracleHt => Some(RepOutcome {
                estimate: oracle_ht(&cells, &outcomes, &respondent, pi),
                ci: None,
                n_eff: None,
            }),
        };
        results.push(outcome);
    }

    Ok(RepResult {
        truth,
        outcomes: results,
        identity_residual,
    })
}

fn tag_of(weights: &WeightsMethod) -> MethodTag {
    match weights {
        WeightsMethod::Raking => MethodTag::Raking,
        WeightsMethod::Multilevel { .. } => MethodTag::Multilevel,
        WeightsMethod::Poststrat => MethodTag::Poststrat,
    }
}

fn solve_weights(
    method: &WeightsMethod,
    design: &InteractionDesign,
    table: &CellTable,
    cache: &mut HashMap<String, Option<WeightSolution>>,
) -> Option<WeightSolution> {
    let key = method.key();
    if let Some(hit) = cache.get(&key) {
        return hit.clone();
    }
    let solved = match method {
        WeightsMethod::Raking => solver::solve(design, table, &CalibrationSpec::raking()).ok(),
        WeightsMethod::Multilevel { max_order, lambda } => {
            let spec = CalibrationSpec {
                max_order: *max_order,
                lambda: lambda.clone(),
                bounds: (0.0, f64::INFINITY),
                balance_tol: 1e-8,
                grad_tol: 1e-8,
                max_iterations: 5000,
            };
            solver::solve(design, table, &spec).ok()
        }
        WeightsMethod::Poststrat => poststrat_weights(design, table).ok(),
    }
    .filter(|w| w.status.is_converged());
    cache.insert(key, solved.clone());
    solved
}

fn fit_model(
    method: &ModelMethod,
    design: &InteractionDesign,
    table: &CellTable,
    seed: u64,
    rep: u64,
    cache: &mut HashMap<String, Option<OutcomeModel>>,
) -> Option<OutcomeModel> {
    let key = method.key();
    if let Some(hit) = cache.get(&key) {
        return hit.clone();
    }
    let fitted = match method {
        ModelMethod::Ridge { order, penalty } => {
            fit_ridge(design, table, *order, *penalty).ok().map(OutcomeModel::Ridge)
        }
        ModelMethod::MapLinear { order, q } => PriorCovariance::per_order(q.clone())
            .and_then(|prior| fit_map_linear(design, table, *order, &prior))
            .ok()
            .map(OutcomeModel::MapLinear),
        ModelMethod::Trees { trees, depth } => {
            // Per-replication tree seed derived from the master seed.
            let tree_seed = seed ^ (rep.wrapping_mul(0x9e3779b97f4a7c15)) ^ 0x7ee5;
            fit_bagged_trees(table, *trees, *depth, tree_seed)
                .ok()
                .map(OutcomeModel::BaggedTrees)
        }
        ModelMethod::CellMeans => Some(OutcomeModel::Smoother(SmootherSpec::DiagonalInverseCounts)),
        ModelMethod::Constant { value } => Some(OutcomeModel::Constant(*value)),
    };
    cache.insert(key, fitted.clone());
    fitted
}

/// Residual of the weighting estimation-error decomposition:
/// `mu(g) - mu = (1/N) sum_s (n_s g - N^P_s) mu_s + (1/N) sum_s n_s g ebar_s`.
fn weighting_identity_residual(
    weights: &WeightSolution,
    table: &CellTable,
    realized: &[f64],
    estimate: f64,
    truth: f64,
) -> f64 {
    let n_total = table.total_population() as f64;
    let sums = table.resp_sums().expect("tabulated with outcomes");
    let mut rhs = KahanSum::new();
    for s in table.active_cells() {
        let n_s = table.resp_count(s) as f64;
        let g = weights.gamma[s];
        let mu_s = realized[s];
        if table.pop_count(s) > 0 {
            rhs.add((n_s * g - table.pop_count(s) as f64) * mu_s);
        } else if n_s > 0.0 {
            rhs.add(n_s * g * mu_s);
        }
        if n_s > 0.0 {
            let ebar = sums[s] / n_s - mu_s;
            rhs.add(n_s * g * ebar);
        }
    }
    ((estimate - truth) - rhs.value() / n_total).abs()
}

/// Residual of the DRP error decomposition:
/// `mu^drp - mu = (1/N) sum_s (n_s g - N^P_s)(mu_s - muhat_s)
///              + (1/N) sum_s n_s g ebar_s`.
fn drp_identity_residual(
    model: &OutcomeModel,
    design: &InteractionDesign,
    weights: &WeightSolution,
    table: &CellTable,
    realized: &[f64],
    estimate: f64,
    truth: f64,
) -> f64 {
    let n_total = table.total_population() as f64;
    let sums = table.resp_sums().expect("tabulated with outcomes");
    let cells = table.active_cells();
    let preds = match model.predict_cells(design, table, &cells) {
        Ok(p) => p,
        Err(_) => return 0.0,
    };
    let mut rhs = KahanSum::new();
    for (&s, &mu_hat) in cells.iter().zip(&preds) {
        let n_s = table.resp_count(s) as f64;
        let g = weights.gamma[s];
        let imb = n_s * g - table.pop_count(s) as f64;
        if table.pop_count(s) > 0 {
            rhs.add(imb * (realized[s] - mu_hat));
        } else if n_s > 0.0 {
            // cells absent from this replication's population: mu_s is 0 mass
            rhs.add(imb * (0.0 - mu_hat));
        }
        if n_s > 0.0 {
            let ebar = sums[s] / n_s - realized[s];
            rhs.add(n_s * g * ebar);
        }
    }
    ((estimate - truth) - rhs.value() / n_total).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::CovariateSchema;
    use crate::simlab::population::{gen_population, CellDistribution, CoeffSpec, OutcomeSpec};

    fn small_suite() -> EstimatorSuite {
        EstimatorSuite {
            alpha: 0.05,
            estimators: vec![
                EstimatorDef {
                    name: "raking".into(),
                    kind: EstimatorKind::Weighting { weights: WeightsMethod::Raking },
                },
                EstimatorDef {
                    name: "multilevel2".into(),
                    kind: EstimatorKind::Weighting {
                        weights: WeightsMethod::Multilevel { max_order: 2, lambda: vec![1.0] },
                    },
                },
                EstimatorDef {
                    name: "mrp_ridge".into(),
                    kind: EstimatorKind::Mrp {
                        model: ModelMethod::Ridge { order: 2, penalty: 1.0 },
                    },
                },
                EstimatorDef {
                    name: "drp_ridge_raking".into(),
                    kind: EstimatorKind::Drp {
                        weights: WeightsMethod::Raking,
                        model: ModelMethod::Ridge { order: 2, penalty: 1.0 },
                    },
                },
                EstimatorDef { name: "oracle_ht".into(), kind: EstimatorKind::OracleHt },
            ],
        }
    }

    fn small_population() -> Population {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        gen_population(
            &schema,
            1200,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::LinearNormal {
                coeffs: CoeffSpec {
                    intercept: 0.5,
                    max_order: 2,
                    scale_by_order: vec![0.6, 0.3],
                    seed: 31,
                },
                noise_sd: 0.4,
            },
            &design,
            77,
        )
        .unwrap()
    }

    #[test]
    fn census_makes_every_estimator_exact() {
        let pop = small_population();
        let pi = vec![1.0; pop.schema.num_cells()];
        let result = run_replications(&pop, &pi, &small_suite(), 5, 99).unwrap();
        for row in &result.rows {
            assert_eq!(row.failures, 0, "{}", row.name);
            // iterative weight solves leave residuals at the 1e-8 gradient
            // tolerance; everything else is exact
            assert!(row.bias.abs() < 1e-7, "{}: {}", row.name, row.bias);
            assert!(row.rmse < 1e-7, "{}: {}", row.name, row.rmse);
        }
    }

    #[test]
    fn identities_hold_per_replication() {
        let pop = small_population();
        let pi: Vec<f64> = (0..pop.schema.num_cells())
            .map(|s| 0.15 + 0.1 * (s % 3) as f64)
            .collect();
        let result = run_replications(&pop, &pi, &small_suite(), 20, 2024).unwrap();
        assert!(
            result.max_identity_residual < 1e-10,
            "{}",
            result.max_identity_residual
        );
    }

    #[test]
    fn rmse_dominates_bias_and_replays_bitwise() {
        let pop = small_population();
        let pi: Vec<f64> = (0..pop.schema.num_cells())
            .map(|s| 0.2 + 0.05 * (s % 4) as f64)
            .collect();
        let a = run_replications(&pop, &pi, &small_suite(), 15, 7).unwrap();
        let b = run_replications(&pop, &pi, &small_suite(), 15, 7).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.bias.to_bits(), rb.bias.to_bits());
            assert_eq!(ra.rmse.to_bits(), rb.rmse.to_bits());
            assert!(ra.rmse * ra.rmse + 1e-12 >= ra.bias * ra.bias);
        }
    }

    #[test]
    fn oracle_ht_matches_inverse_probability_weighted_mean() {
        let pop = small_population();
        let pi = vec![0.25; pop.schema.num_cells()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let resp: Vec<bool> = pop.cells.iter().map(|_| rng.gen::<f64>() < 0.25).collect();
        let est = oracle_ht(&pop.cells, &pop.base_outcomes, &resp, &pi);
        // definitional cross-check: weights 1/pi in the weighted-mean form
        let n = pop.size() as f64;
        let direct: f64 = pop
            .cells
            .iter()
            .zip(&pop.base_outcomes)
            .zip(&resp)
            .map(|((&c, &y), &r)| if r { y / pi[c as usize] } else { 0.0 })
            .sum::<f64>()
            / n;
        approx::assert_relative_eq!(est, direct, epsilon = 1e-12);
    }

    #[test]
    fn two_cell_oracle_ht_closed_form() {
        let cells = vec![0u32, 0, 1, 1];
        let outcomes = vec![1.0, 1.0, 0.0, 2.0];
        let resp = vec![true, false, true, true];
        let pi = vec![0.5, 0.8];
        let est = oracle_ht(&cells, &outcomes, &resp, &pi);
        approx::assert_relative_eq!(
            est,
            (1.0 / 0.5 + 0.0 / 0.8 + 2.0 / 0.8) / 4.0,
            epsilon = 1e-14
        );
    }
}

//! Point estimation, variance, and diagnostics.
//!
//! The weighted estimate is `mu(g) = (1/N) sum_s n_s g(s) Ybar_s`. MRP
//! post-stratifies model predictions, `mu^mrp = (1/N) sum_s N^P_s mu_s`, and
//! DRP combines the two:
//!
//! ```text
//!     mu^drp = mu(g)   + (1/N) sum_s mu_s (N^P_s - n_s g(s))
//!            = mu^mrp  + (1/N) sum_s n_s g(s) (Ybar_s - mu_s)
//! ```
//!
//! Both arrangements are computed on every call and must agree to 1e-12
//! relative. The plug-in variance is
//! `V = (1/N^2) sum_i R_i g(S_i)^2 (Y_i - mu_{S_i})^2`, evaluated from
//! within-cell outcome sums and sums of squares.

use crate::design::{CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::outcomes::{OutcomeModel, SmootherSpec};
use crate::solver::{
    self, finish_solution_public, CalibrationSpec, SolveStatus, WeightSolution,
};
use crate::util::{ksum, KahanSum};

/// Estimator family tag carried on reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Raking,
    Multilevel,
    Poststrat,
    Mrp,
    Drp,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Raking => "raking",
            MethodTag::Multilevel => "multilevel",
            MethodTag::Poststrat => "poststrat",
            MethodTag::Mrp => "mrp",
            MethodTag::Drp => "drp",
        }
    }
}

/// One point estimate with optional inference fields.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub method: MethodTag,
    pub estimate: f64,
    pub variance: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub alpha: f64,
    pub n_eff: Option<f64>,
    pub design_effect: Option<f64>,
    /// The DRP adjustment term (zero-ish when balance is already good).
    pub bias_correction: Option<f64>,
}

impl EstimateReport {
    fn point(method: MethodTag, estimate: f64) -> Self {
        Self {
            method,
            estimate,
            variance: None,
            ci: None,
            alpha: 0.05,
            n_eff: None,
            design_effect: None,
            bias_correction: None,
        }
    }
}

/// Weighted respondent mean `mu(g)`.
pub fn weighted_mean(
    weights: &WeightSolution,
    table: &CellTable,
    method: MethodTag,
) -> Result<EstimateReport> {
    let sums = table
        .resp_sums()
        .ok_or_else(|| Error::Estimation("outcomes missing; tabulate an outcome column".into()))?;
    let n_total = table.total_population() as f64;
    let estimate = ksum(weights.support.iter().map(|&s| weights.gamma[s] * sums[s])) / n_total;
    let mut report = EstimateReport::point(method, estimate);
    report.n_eff = Some(weights.n_eff);
    report.design_effect = Some(weights.design_effect(table));
    Ok(report)
}

/// Post-stratification weights `N^P_s / n^R_s`. Fails when any populated
/// cell lacks respondents, listing the offenders.
pub fn poststrat_weights(
    design: &InteractionDesign,
    table: &CellTable,
) -> Result<WeightSolution> {
    let mut empty = Vec::new();
    for s in table.populated_cells() {
        if table.resp_count(s) == 0 {
            empty.push(s);
        }
    }
    if !empty.is_empty() {
        let shown: Vec<String> = empty.iter().take(12).map(|s| s.to_string()).collect();
        return Err(Error::Infeasible(format!(
            "post-stratification undefined: {} populated cells without respondents (cells {}{})",
            empty.len(),
            shown.join(", "),
            if empty.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let mut gamma = vec![0.0; table.num_cells()];
    let mut support = Vec::new();
    for s in table.support_cells() {
        gamma[s] = table.pop_count(s) as f64 / table.resp_count(s) as f64;
        support.push(s);
    }
    let spec = CalibrationSpec::raking();
    finish_solution_public(design, table, &spec, gamma, support, SolveStatus::Converged)
}

/// Post-stratify on a coarsened schema: collapse levels first, then weight.
pub fn poststrat_weights_collapsed(
    table: &CellTable,
    groupings: &[Vec<usize>],
) -> Result<(CellTable, WeightSolution)> {
    let coarse = table.collapse(groupings)?;
    let design = crate::design::build_design(coarse.schema(), 1)?;
    let weights = poststrat_weights(&design, &coarse)?;
    Ok((coarse, weights))
}

/// MRP: population-weighted model predictions.
pub fn mrp_estimate(
    model: &OutcomeModel,
    design: &InteractionDesign,
    table: &CellTable,
) -> Result<EstimateReport> {
    let cells: Vec<usize> = table.populated_cells().collect();
    let preds = model.predict_cells(design, table, &cells)?;
    let n_total = table.total_population() as f64;
    let estimate = ksum(
        cells
            .iter()
            .zip(&preds)
            .map(|(&s, &mu)| table.pop_count(s) as f64 * mu),
    ) / n_total;
    Ok(EstimateReport::point(MethodTag::Mrp, estimate))
}

/// Model-estimated bias of a weighting estimator:
/// `(1/N) sum_s mu_s (N^P_s - n_s g(s))`.
pub fn bias_estimate(
    model: &OutcomeModel,
    design: &InteractionDesign,
    weights: &WeightSolution,
    table: &CellTable,
) -> Result<f64> {
    let cells = table.active_cells();
    let preds = model.predict_cells(design, table, &cells)?;
    let n_total = table.total_population() as f64;
    Ok(ksum(cells.iter().zip(&preds).map(|(&s, &mu)| {
        mu * (table.pop_count(s) as f64 - table.resp_count(s) as f64 * weights.gamma[s])
    })) / n_total)
}

/// DRP: weighted estimate plus model bias correction. Both arrangements of
/// the estimator are evaluated and must agree to 1e-12 relative.
pub fn drp_estimate(
    model: &OutcomeModel,
    design: &InteractionDesign,
    weights: &WeightSolution,
    table: &CellTable,
) -> Result<EstimateReport> {
    let weighted = weighted_mean(weights, table, MethodTag::Drp)?;
    let correction = bias_estimate(model, design, weights, table)?;
    let form_one = weighted.estimate + correction;

    // Second form: MRP plus weighted within-cell model error.
    let mrp = mrp_estimate(model, design, table)?.estimate;
    let sums = table.resp_sums().expect("checked by weighted_mean");
    let support_preds = model.predict_cells(design, table, &weights.support)?;
    let error_term = ksum(weights.support.iter().zip(&support_preds).map(|(&s, &mu)| {
        let n_s = table.resp_count(s) as f64;
        n_s * weights.gamma[s] * (sums[s] / n_s - mu)
    })) / table.total_population() as f64;
    let form_two = mrp + error_term;

    let diff = (form_one - form_two).abs();
    let scale = form_one.abs().max(form_two.abs());
    if diff > 0.0 && diff > 1e-12 * scale.max(1e-300) {
        return Err(Error::Estimation(format!(
            "DRP forms disagree beyond tolerance: {} vs {}",
            form_one, form_two
        )));
    }

    let mut report = EstimateReport::point(MethodTag::Drp, form_one);
    report.n_eff = weighted.n_eff;
    report.design_effect = weighted.design_effect;
    report.bias_correction = Some(correction);
    Ok(report)
}

/// Plug-in variance and normal confidence interval around `center`.
/// Requires within-cell sums of squares (unit-level outcomes or aggregated
/// second moments).
pub fn variance_ci(
    model: &OutcomeModel,
    design: &InteractionDesign,
    weights: &WeightSolution,
    table: &CellTable,
    alpha: f64,
    center: f64,
) -> Result<(f64, (f64, f64))> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config("alpha must lie in (0, 1)".into()));
    }
    let sums = table
        .resp_sums()
        .ok_or_else(|| Error::Estimation("outcomes missing".into()))?;
    let sumsq = table.resp_sumsq().ok_or_else(|| {
        Error::Estimation(
            "within-cell second moments required: tabulate unit outcomes or supply sums of squares"
                .into(),
        )
    })?;
    let preds = model.predict_cells(design, table, &weights.support)?;
    let n_total = table.total_population() as f64;
    let variance = ksum(weights.support.iter().zip(&preds).map(|(&s, &mu)| {
        let n_s = table.resp_count(s) as f64;
        let g = weights.gamma[s];
        // sum_{i in s} (Y_i - mu_s)^2 from aggregated moments
        let ss = sumsq[s] - 2.0 * mu * sums[s] + n_s * mu * mu;
        g * g * ss.max(0.0)
    })) / (n_total * n_total);
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = z * variance.sqrt();
    Ok((variance, (center - half, center + half)))
}

/// DRP with plug-in variance and CI attached.
pub fn drp_with_ci(
    model: &OutcomeModel,
    design: &InteractionDesign,
    weights: &WeightSolution,
    table: &CellTable,
    alpha: f64,
) -> Result<EstimateReport> {
    let mut report = drp_estimate(model, design, weights, table)?;
    let (variance, ci) = variance_ci(model, design, weights, table, alpha, report.estimate)?;
    report.variance = Some(variance);
    report.ci = Some(ci);
    report.alpha = alpha;
    Ok(report)
}

/// Weighting estimate with a CI from within-cell residuals (the model is the
/// cell-mean smoother, so residuals are deviations from respondent means).
pub fn weighting_with_ci(
    weights: &WeightSolution,
    table: &CellTable,
    alpha: f64,
    method: MethodTag,
    design: &InteractionDesign,
) -> Result<EstimateReport> {
    let mut report = weighted_mean(weights, table, method)?;
    let model = OutcomeModel::Smoother(SmootherSpec::DiagonalInverseCounts);
    let (variance, ci) = variance_ci(&model, design, weights, table, alpha, report.estimate)?;
    report.variance = Some(variance);
    report.ci = Some(ci);
    report.alpha = alpha;
    Ok(report)
}

/// Effective sample size `(sum n g)^2 / sum n g^2` and the design effect.
pub fn effective_sample_size(weights: &WeightSolution, table: &CellTable) -> (f64, f64) {
    (weights.n_eff, weights.design_effect(table))
}

/// Relative imbalance of one design column.
#[derive(Debug, Clone)]
pub struct ImbalanceColumn {
    pub column: usize,
    pub label: String,
    pub order: usize,
    /// `|sum_s D_sj (n_s g(s) - N^P_s)| / sum_s D_sj N^P_s`; `None` when the
    /// target count is zero (column skipped and flagged).
    pub relative: Option<f64>,
}

/// Imbalance diagnostics for a weight solution.
#[derive(Debug, Clone)]
pub struct ImbalanceReport {
    pub per_column: Vec<ImbalanceColumn>,
    /// Count-scale l2 norms per order `1..=max_order`.
    pub per_order_l2: Vec<f64>,
    /// Cell-distribution imbalance `sum_s (n_s g(s) - N^P_s)^2` (the
    /// bias-bound factor of the MSE decomposition).
    pub bias_bound_term: f64,
    /// Noise multiplier `sum_s (n_s/N)^2 g(s)^2`.
    pub noise_term: f64,
    pub skipped_columns: usize,
}

pub fn imbalance_report(
    weights: &WeightSolution,
    design: &InteractionDesign,
    table: &CellTable,
) -> Result<ImbalanceReport> {
    let cols = solver::imbalance_columns_public(design, table, &weights.gamma, design.max_order())?;
    let mut targets = vec![0.0f64; cols.len()];
    for s in table.populated_cells() {
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, design.max_order()) {
            targets[c as usize] += table.pop_count(s) as f64;
        }
    }
    let mut per_column = Vec::with_capacity(cols.len());
    let mut skipped = 0usize;
    for (c, (&imb, &target)) in cols.iter().zip(&targets).enumerate() {
        let relative = if target > 0.0 {
            Some(imb.abs() / target)
        } else {
            skipped += 1;
            None
        };
        per_column.push(ImbalanceColumn {
            column: c,
            label: design.column_label(c),
            order: design.column_order(c),
            relative,
        });
    }
    let n_total = table.total_population() as f64;
    let mut bias_bound = KahanSum::new();
    let mut noise = KahanSum::new();
    for s in table.active_cells() {
        let n_s = table.resp_count(s) as f64;
        let d = n_s * weights.gamma[s] - table.pop_count(s) as f64;
        bias_bound.add(d * d);
        noise.add((n_s / n_total) * (n_s / n_total) * weights.gamma[s] * weights.gamma[s]);
    }
    Ok(ImbalanceReport {
        per_column,
        per_order_l2: weights.imbalance_by_order.clone(),
        bias_bound_term: bias_bound.value(),
        noise_term: noise.value(),
        skipped_columns: skipped,
    })
}

/// One grid point of the penalty trade-off.
#[derive(Debug, Clone)]
pub struct TradeoffPoint {
    pub lambda: f64,
    /// Total higher-order imbalance `sum_{k>=2} ||.||_2^2` (count scale).
    pub imbalance_sq: f64,
    pub n_eff: f64,
    pub sum_sq_weights: f64,
    pub converged: bool,
}

/// The traced bias-variance trade-off with its selection record.
#[derive(Debug, Clone)]
pub struct TradeoffCurve {
    /// Points in ascending lambda order.
    pub points: Vec<TradeoffPoint>,
    pub raking_imbalance_sq: f64,
    pub raking_n_eff: f64,
    pub selected_lambda: Option<f64>,
    pub selection_rule: String,
}

/// Default grid: 25 log-spaced points spanning `[1e-3, 1e6] * (N / J)`.
pub fn default_lambda_grid(table: &CellTable) -> Vec<f64> {
    let scale = table.total_population() as f64 / table.num_cells() as f64;
    log_spaced(1e-3 * scale, 1e6 * scale, 25)
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Trace the imbalance / effective-sample-size trade-off over a common
/// penalty grid, warm-starting the dual along the chain from the most to the
/// least regularized point. The selected point is the largest converged
/// lambda achieving at least 95% of the imbalance reduction that the
/// smallest grid point attains relative to raking.
pub fn sweep_tradeoff(
    design: &InteractionDesign,
    table: &CellTable,
    grid: &[f64],
    bounds: (f64, f64),
    max_order: usize,
) -> Result<TradeoffCurve> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted[0] <= 0.0 || sorted.iter().any(|l| !l.is_finite()) {
        return Err(Error::Config("grid values must be positive and finite".into()));
    }

    let raking_spec = CalibrationSpec::with_common_lambda(max_order, f64::INFINITY)
        .with_bounds(bounds.0, bounds.1);
    let raking = solver::solve(design, table, &raking_spec)?;
    let raking_imbalance_sq = raking.higher_order_imbalance_sq();

    let mut points: Vec<TradeoffPoint> = Vec::with_capacity(sorted.len());
    let mut warm = None;
    for &lambda in sorted.iter().rev() {
        let spec =
            CalibrationSpec::with_common_lambda(max_order, lambda).with_bounds(bounds.0, bounds.1);
        let sol = solver::solve_warm(design, table, &spec, warm.as_ref())?;
        points.push(TradeoffPoint {
            lambda,
            imbalance_sq: sol.higher_order_imbalance_sq(),
            n_eff: sol.n_eff,
            sum_sq_weights: sol.sum_sq_weights,
            converged: sol.status.is_converged(),
        });
        warm = sol.dual;
    }
    points.reverse();

    let selection_rule =
        "largest lambda achieving >= 95% of the smallest-lambda imbalance reduction relative to raking"
            .to_string();
    let selected_lambda = select_tradeoff_lambda(&points, raking_imbalance_sq);

    Ok(TradeoffCurve {
        points,
        raking_imbalance_sq,
        raking_n_eff: raking.n_eff,
        selected_lambda,
        selection_rule,
    })
}

/// The selection rule, exposed so emitted curves can be re-checked.
pub fn select_tradeoff_lambda(points: &[TradeoffPoint], raking_imbalance_sq: f64) -> Option<f64> {
    let converged: Vec<&TradeoffPoint> = points.iter().filter(|p| p.converged).collect();
    let floor = converged.first()?.imbalance_sq; // smallest lambda endpoint
    let potential = raking_imbalance_sq - floor;
    if potential <= 0.0 {
        return converged.last().map(|p| p.lambda);
    }
    converged
        .iter()
        .rev()
        .find(|p| raking_imbalance_sq - p.imbalance_sq >= 0.95 * potential)
        .map(|p| p.lambda)
}

/// Inverse standard normal CDF (Wichura's AS 241, rational approximations
/// accurate well past 1e-8).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1)");
    const A: [f64; 8] = [
        3.3871328727963666080e0,
        1.3314166789178437745e2,
        1.9715909503065514427e3,
        1.3731693765509461125e4,
        4.5921953931549871457e4,
        6.7265770927008700853e4,
        3.3430575583588128105e4,
        2.5090809287301226727e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.2313330701600911252e1,
        6.8718700749205790830e2,
        5.3941960214247511077e3,
        2.1213794301586595867e4,
        3.9307895800092710610e4,
        2.8729085735721942674e4,
        5.2264952788528545610e3,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734e0,
        4.63033784615654529590e0,
        5.76949722146069140550e0,
        3.64784832476320460504e0,
        1.27045825245236838258e0,
        2.41780725177450611770e-1,
        2.27238449892691845833e-2,
        7.74545014278341407640e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.05319162663775882187e0,
        1.67638483018380384940e0,
        6.89767334985100004550e-1,
        1.48103976427480074590e-1,
        1.51986665636164571966e-2,
        5.47593808499534494600e-4,
        1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.65790464350110377720e0,
        5.46378491116411436990e0,
        1.78482653991729133580e0,
        2.96560571828504891230e-1,
        2.65321895265761230930e-2,
        1.24266094738807843860e-3,
        2.71155556874348757815e-5,
        2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.99832206555887937690e-1,
        1.36929880922735805310e-1,
        1.48753612908506148525e-2,
        7.86869131145613259100e-4,
        1.84631831751005468180e-5,
        1.42151175831644588870e-7,
        2.04426310338993978564e-15,
    ];
    let poly = |c: &[f64; 8], x: f64| {
        c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
    };
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, tabulate, CovariateSchema, MicroRow};
    use crate::outcomes::{fit_ridge, OutcomeModel};
    use approx::assert_relative_eq;

    /// Two cells, n = (10, 10), N^P = (60, 40), Ybar = (1, 0).
    fn two_cell() -> (InteractionDesign, CellTable) {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let mut rows = Vec::new();
        for i in 0..60 {
            rows.push(MicroRow {
                levels: vec![0],
                respondent: i < 10,
                outcome: if i < 10 { Some(1.0) } else { None },
            });
        }
        for i in 0..40 {
            rows.push(MicroRow {
                levels: vec![1],
                respondent: i < 10,
                outcome: if i < 10 { Some(0.0) } else { None },
            });
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 1).unwrap();
        (design, table)
    }

    #[test]
    fn hand_arithmetic_two_cell_mean() {
        let (design, table) = two_cell();
        let weights = poststrat_weights(&design, &table).unwrap();
        let est = weighted_mean(&weights, &table, MethodTag::Poststrat).unwrap();
        // gamma = (6,4): mu = (10*6*1 + 10*4*0) / 100 = 0.6
        assert_relative_eq!(est.estimate, 0.6, epsilon = 1e-14);
    }

    #[test]
    fn uniform_weights_give_the_sample_mean() {
        let (design, table) = two_cell();
        let mut weights = poststrat_weights(&design, &table).unwrap();
        for s in 0..2 {
            weights.gamma[s] = 100.0 / 20.0;
        }
        let est = weighted_mean(&weights, &table, MethodTag::Raking).unwrap();
        assert_relative_eq!(est.estimate, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn poststrat_matches_population_share_average() {
        let (design, table) = two_cell();
        let weights = poststrat_weights(&design, &table).unwrap();
        let est = weighted_mean(&weights, &table, MethodTag::Poststrat).unwrap();
        let direct = 60.0 / 100.0 * 1.0 + 40.0 / 100.0 * 0.0;
        assert_relative_eq!(est.estimate, direct, epsilon = 1e-14);
    }

    #[test]
    fn poststrat_errors_list_empty_cells() {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let rows = vec![
            MicroRow { levels: vec![0], respondent: true, outcome: None },
            MicroRow { levels: vec![1], respondent: false, outcome: None },
        ];
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 1).unwrap();
        let err = poststrat_weights(&design, &table).unwrap_err();
        assert!(err.to_string().contains("cells 1"), "{}", err);
    }

    #[test]
    fn collapsed_poststrat_becomes_feasible() {
        // A 2x4 schema with an unsupported populated cell; merging pairs of
        // levels of the second covariate makes every coarse cell supported.
        let schema = CovariateSchema::from_level_counts(&[2, 4]).unwrap();
        let mut rows = Vec::new();
        let spec = [
            (vec![0usize, 0usize], 5u64, 2u64, 1.0),
            (vec![0, 1], 5, 1, 0.0),
            (vec![0, 2], 5, 0, 0.0), // populated, no respondents
            (vec![0, 3], 5, 3, 1.0),
            (vec![1, 0], 5, 1, 0.0),
            (vec![1, 1], 5, 1, 1.0),
            (vec![1, 2], 5, 2, 0.0),
            (vec![1, 3], 5, 1, 1.0),
        ];
        for (lv, pop, resp, y) in &spec {
            for i in 0..*pop {
                rows.push(MicroRow {
                    levels: lv.clone(),
                    respondent: i < *resp,
                    outcome: if i < *resp { Some(*y) } else { None },
                });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        assert!(poststrat_weights(&design, &table).is_err());
        let (coarse, weights) =
            poststrat_weights_collapsed(&table, &[vec![0, 1], vec![0, 0, 1, 1]]).unwrap();
        assert_eq!(coarse.num_cells(), 4);
        assert_eq!(weights.support.len(), 4);
    }

    #[test]
    fn constant_model_mrp_returns_the_constant() {
        let (design, table) = two_cell();
        let model = OutcomeModel::Constant(0.37);
        let est = mrp_estimate(&model, &design, &table).unwrap();
        assert_relative_eq!(est.estimate, 0.37, epsilon = 1e-14);
    }

    #[test]
    fn cell_mean_model_mrp_equals_poststrat_estimate() {
        let (design, table) = two_cell();
        let model = OutcomeModel::Smoother(SmootherSpec::DiagonalInverseCounts);
        let mrp = mrp_estimate(&model, &design, &table).unwrap();
        assert_relative_eq!(mrp.estimate, 0.6, epsilon = 1e-14);
    }

    #[test]
    fn linear_model_mrp_equals_population_feature_dot() {
        let (design, table) = two_cell();
        let ridge = fit_ridge(&design, &table, 1, 0.0).unwrap();
        let feats = crate::outcomes::population_feature_mean(&design, &table, 1).unwrap();
        let by_features: f64 = ridge
            .eta
            .iter()
            .zip(&feats)
            .map(|(e, f)| e * f)
            .sum();
        let est = mrp_estimate(&OutcomeModel::Ridge(ridge), &design, &table).unwrap();
        assert_relative_eq!(est.estimate, by_features, epsilon = 1e-12);
    }

    #[test]
    fn bias_estimate_is_zero_under_poststrat_and_constant_models() {
        let (design, table) = two_cell();
        let ps = poststrat_weights(&design, &table).unwrap();
        let model = OutcomeModel::Constant(5.0);
        assert_eq!(bias_estimate(&model, &design, &ps, &table).unwrap(), 0.0);
        // constant model with normalized (intercept-balanced) weights
        let mut spec = CalibrationSpec::raking();
        spec.grad_tol = 1e-12;
        spec.balance_tol = 1e-12;
        let raking = crate::solver::solve(&design, &table, &spec).unwrap();
        let b = bias_estimate(&model, &design, &raking, &table).unwrap();
        assert!(b.abs() < 1e-9, "{}", b);
    }

    #[test]
    fn drp_reduces_to_weighted_mean_under_zero_model() {
        let (design, table) = two_cell();
        let raking = crate::solver::solve(&design, &table, &CalibrationSpec::raking()).unwrap();
        let zero = OutcomeModel::Constant(0.0);
        let drp = drp_estimate(&zero, &design, &raking, &table).unwrap();
        let wm = weighted_mean(&raking, &table, MethodTag::Raking).unwrap();
        assert_relative_eq!(drp.estimate, wm.estimate, epsilon = 1e-14);
    }

    #[test]
    fn drp_with_poststrat_weights_equals_poststrat_estimate() {
        let (design, table) = two_cell();
        let ps = poststrat_weights(&design, &table).unwrap();
        let model = OutcomeModel::Constant(0.9);
        let drp = drp_estimate(&model, &design, &ps, &table).unwrap();
        assert_relative_eq!(drp.estimate, 0.6, epsilon = 1e-14);
        assert_eq!(drp.bias_correction, Some(0.0));
    }

    #[test]
    fn drp_with_cell_mean_model_equals_mrp() {
        let (design, table) = two_cell();
        let raking = crate::solver::solve(&design, &table, &CalibrationSpec::raking()).unwrap();
        let model = OutcomeModel::Smoother(SmootherSpec::DiagonalInverseCounts);
        let drp = drp_estimate(&model, &design, &raking, &table).unwrap();
        let mrp = mrp_estimate(&model, &design, &table).unwrap();
        assert_relative_eq!(drp.estimate, mrp.estimate, epsilon = 1e-12);
    }

    #[test]
    fn variance_zero_when_residuals_vanish() {
        let (design, table) = two_cell();
        let ps = poststrat_weights(&design, &table).unwrap();
        // cell-mean model: within-cell outcomes are constant here
        let model = OutcomeModel::Smoother(SmootherSpec::DiagonalInverseCounts);
        let (v, _) = variance_ci(&model, &design, &ps, &table, 0.05, 0.6).unwrap();
        assert!(v.abs() < 1e-18);
    }

    #[test]
    fn single_cell_variance_hand_value() {
        // 5 units, 2 respondents with outcomes 1 and 0; gamma = N/n = 2.5.
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let mut rows = Vec::new();
        for i in 0..5 {
            rows.push(MicroRow {
                levels: vec![0],
                respondent: i < 2,
                outcome: if i < 2 { Some(if i == 0 { 1.0 } else { 0.0 }) } else { None },
            });
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 1).unwrap();
        let ps = poststrat_weights(&design, &table).unwrap();
        let model = OutcomeModel::Constant(0.5);
        let (v, _) = variance_ci(&model, &design, &ps, &table, 0.05, 0.5).unwrap();
        // V = (1/25) * 2.5^2 * [(1-0.5)^2 + (0-0.5)^2] = 6.25 * 0.5 / 25
        assert_relative_eq!(v, 6.25 * 0.5 / 25.0, epsilon = 1e-14);
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_relative_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
        assert_relative_eq!(normal_quantile(0.995), 2.5758293035489004, epsilon = 1e-9);
        assert_relative_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
        assert_relative_eq!(normal_quantile(0.025), -1.959963984540054, epsilon = 1e-9);
    }

    #[test]
    fn imbalance_zero_under_poststrat() {
        let (design, table) = two_cell();
        let ps = poststrat_weights(&design, &table).unwrap();
        let rep = imbalance_report(&ps, &design, &table).unwrap();
        for order in &rep.per_order_l2 {
            assert!(order.abs() < 1e-9);
        }
        assert!(rep.bias_bound_term < 1e-18);
    }

    #[test]
    fn n_eff_uniform_is_n_and_decreases_under_perturbation() {
        let (design, table) = two_cell();
        let mut w = poststrat_weights(&design, &table).unwrap();
        for s in 0..2 {
            w.gamma[s] = 5.0;
        }
        let refreshed = finish_solution_public(
            &design,
            &table,
            &CalibrationSpec::raking(),
            w.gamma.clone(),
            w.support.clone(),
            SolveStatus::Converged,
        )
        .unwrap();
        assert_relative_eq!(refreshed.n_eff, 20.0, epsilon = 1e-12);
        // perturb at fixed sum
        let mut gamma = w.gamma.clone();
        gamma[0] += 0.5;
        gamma[1] -= 0.5;
        let perturbed = finish_solution_public(
            &design,
            &table,
            &CalibrationSpec::raking(),
            gamma,
            w.support.clone(),
            SolveStatus::Converged,
        )
        .unwrap();
        assert!(perturbed.n_eff < refreshed.n_eff);
        // hand value from the 2-cell example: (100)^2 / (10*36 + 10*16)
        let (design2, table2) = two_cell();
        let ps = poststrat_weights(&design2, &table2).unwrap();
        assert_relative_eq!(ps.n_eff, 10000.0 / 520.0, epsilon = 1e-10);
    }
}

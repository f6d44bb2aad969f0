//! Named simulation designs at the scale of the motivating survey problem:
//! eight coded demographic covariates, a population in the tens of
//! thousands, and a response rate around 4%.

use super::population::{CellDistribution, CoeffSpec, OutcomeSpec, PairTilt};
use super::replicate::{EstimatorDef, EstimatorKind, EstimatorSuite, ModelMethod, WeightsMethod};
use super::response::ResponseSpec;
use crate::design::CovariateSchema;
use crate::error::{Error, Result};

/// A fully specified simulation design.
#[derive(Debug, Clone)]
pub struct SimPreset {
    pub name: String,
    pub schema: CovariateSchema,
    pub dist: CellDistribution,
    pub outcome: OutcomeSpec,
    pub response: ResponseSpec,
    pub suite: EstimatorSuite,
    pub population_size: usize,
    pub replications: usize,
    pub seed: u64,
    /// Carry base outcomes through replications instead of redrawing.
    pub freeze_outcomes: bool,
}

/// Eight covariates with the level layout of the motivating survey data.
pub fn survey_schema() -> CovariateSchema {
    CovariateSchema::from_level_counts(&[6, 9, 4, 2, 4, 3, 2, 5]).expect("static schema")
}

/// Same eight covariates with age split twice as fine, giving J = 103,680.
pub fn survey_schema_fine_age() -> CovariateSchema {
    CovariateSchema::from_level_counts(&[6, 9, 4, 2, 8, 3, 2, 5]).expect("static schema")
}

fn survey_distribution(schema: &CovariateSchema) -> CellDistribution {
    // Declining level shares within each covariate, plus mild pairwise
    // associations so the joint distribution is not a pure product.
    let marginals = schema
        .level_counts()
        .iter()
        .map(|&k| {
            let raw: Vec<f64> = (0..k).map(|v| (-0.3 * v as f64).exp()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / total).collect()
        })
        .collect();
    CellDistribution {
        marginals,
        tilts: vec![
            PairTilt { a: 0, b: 1, strength: 0.25 },
            PairTilt { a: 0, b: 7, strength: 0.30 },
            PairTilt { a: 2, b: 7, strength: 0.30 },
        ],
    }
}

const RESPONSE_SEED: u64 = 08_2020;

/// Shared response/outcome coefficient draws: both models load on the same
/// standardized interaction effects, so differential response is genuinely
/// informative about the outcome.
fn fourth_order_response() -> CoeffSpec {
    CoeffSpec {
        intercept: -1.09,
        max_order: 4,
        scale_by_order: vec![0.12, 0.05, 0.025, 0.012],
        seed: RESPONSE_SEED,
    }
}

fn fourth_order_outcome() -> CoeffSpec {
    CoeffSpec {
        intercept: 0.0,
        max_order: 4,
        scale_by_order: vec![0.40, 0.18, 0.08, 0.04],
        seed: RESPONSE_SEED,
    }
}

/// The count-scale penalty `lambda = 1` of the primal program corresponds
/// to `lambda / N` in the solver's dual normalization (the dual divides the
/// data terms by N while keeping the regularizer unscaled).
fn dual_scale_lambda(count_scale: f64, population_size: usize) -> f64 {
    count_scale / population_size as f64
}

fn survey_suite(population_size: usize) -> EstimatorSuite {
    let lambda = dual_scale_lambda(1.0, population_size);
    let ridge = ModelMethod::Ridge { order: 3, penalty: 300.0 };
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
                    weights: WeightsMethod::Multilevel { max_order: 2, lambda: vec![lambda] },
                },
            },
            EstimatorDef {
                name: "mrp_ridge3".into(),
                kind: EstimatorKind::Mrp { model: ridge.clone() },
            },
            EstimatorDef {
                name: "drp_ridge3_raking".into(),
                kind: EstimatorKind::Drp { weights: WeightsMethod::Raking, model: ridge },
            },
            EstimatorDef { name: "oracle_ht".into(), kind: EstimatorKind::OracleHt },
        ],
    }
}

/// Look up a named preset.
pub fn preset(name: &str) -> Result<SimPreset> {
    match name {
        "fourth-order" => Ok(fourth_order_preset()),
        "forest" => Ok(forest_preset()),
        "coverage" => Ok(coverage_preset()),
        "scale" => Ok(scale_preset()),
        other => Err(Error::Config(format!(
            "unknown preset `{}` (available: fourth-order, forest, coverage, scale)",
            other
        ))),
    }
}

/// Fourth-order logistic response and outcome, under-regularized so overlap
/// is poor; the flagship bias/RMSE comparison design.
pub fn fourth_order_preset() -> SimPreset {
    let schema = survey_schema();
    let dist = survey_distribution(&schema);
    SimPreset {
        name: "fourth-order".into(),
        dist,
        outcome: OutcomeSpec::LogisticBinary { coeffs: fourth_order_outcome() },
        response: ResponseSpec::Logistic { coeffs: fourth_order_response(), scale: 3.0 },
        suite: survey_suite(50_000),
        population_size: 50_000,
        replications: 1000,
        seed: 20_16,
        freeze_outcomes: false,
        schema,
    }
}

/// Random-forest response against fixed base outcomes.
pub fn forest_preset() -> SimPreset {
    let schema = survey_schema();
    let dist = survey_distribution(&schema);
    SimPreset {
        name: "forest".into(),
        dist,
        outcome: OutcomeSpec::LogisticBinary { coeffs: fourth_order_outcome() },
        response: ResponseSpec::Forest {
            base: fourth_order_response(),
            base_scale: 3.0,
            trees: 100,
            depth: 6,
            seed: RESPONSE_SEED,
        },
        suite: survey_suite(50_000),
        population_size: 50_000,
        replications: 1000,
        seed: 20_17,
        freeze_outcomes: true,
        schema,
    }
}

/// Well-specified linear outcome with moderate overlap, for interval
/// coverage checks.
pub fn coverage_preset() -> SimPreset {
    let schema = CovariateSchema::from_level_counts(&[4, 3, 3, 2, 2]).expect("static schema");
    let dist = survey_distribution(&schema);
    let outcome_coeffs = CoeffSpec {
        intercept: 1.0,
        max_order: 2,
        scale_by_order: vec![0.5, 0.2],
        seed: 4_242,
    };
    let response_coeffs = CoeffSpec {
        intercept: -1.6,
        max_order: 2,
        scale_by_order: vec![0.25, 0.10],
        seed: 4_242,
    };
    SimPreset {
        name: "coverage".into(),
        dist,
        outcome: OutcomeSpec::LinearNormal { coeffs: outcome_coeffs, noise_sd: 0.8 },
        response: ResponseSpec::Logistic { coeffs: response_coeffs, scale: 1.0 },
        suite: EstimatorSuite {
            alpha: 0.05,
            estimators: vec![
                EstimatorDef {
                    name: "drp_ridge2_ml2".into(),
                    kind: EstimatorKind::Drp {
                        weights: WeightsMethod::Multilevel {
                            max_order: 2,
                            lambda: vec![dual_scale_lambda(1.0, 20_000)],
                        },
                        model: ModelMethod::Ridge { order: 2, penalty: 0.1 },
                    },
                },
                EstimatorDef { name: "oracle_ht".into(), kind: EstimatorKind::OracleHt },
            ],
        },
        population_size: 20_000,
        replications: 2000,
        seed: 99_95,
        freeze_outcomes: false,
        schema,
    }
}

/// The J = 103,680 layout with a realistic respondent budget; exercises the
/// solver at full cell count.
pub fn scale_preset() -> SimPreset {
    let schema = survey_schema_fine_age();
    let dist = survey_distribution(&schema);
    let mut response = fourth_order_response();
    response.intercept = -1.09;
    SimPreset {
        name: "scale".into(),
        dist,
        outcome: OutcomeSpec::Constant { value: 0.0 },
        response: ResponseSpec::Logistic { coeffs: response, scale: 3.0 },
        suite: EstimatorSuite {
            alpha: 0.05,
            estimators: vec![EstimatorDef {
                name: "multilevel2".into(),
                kind: EstimatorKind::Weighting {
                    weights: WeightsMethod::Multilevel {
                        max_order: 2,
                        lambda: vec![dual_scale_lambda(1.0, 50_000)],
                    },
                },
            }],
        },
        population_size: 50_000,
        replications: 1,
        seed: 10_3680,
        freeze_outcomes: false,
        schema,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survey_schema_cell_counts() {
        assert_eq!(survey_schema().num_cells(), 51_840);
        assert_eq!(survey_schema_fine_age().num_cells(), 103_680);
    }

    #[test]
    fn presets_resolve_by_name() {
        for name in ["fourth-order", "forest", "coverage", "scale"] {
            assert_eq!(preset(name).unwrap().name, name);
        }
        assert!(preset("nope").is_err());
    }
}

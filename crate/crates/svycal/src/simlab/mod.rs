//! Synthetic populations, response models, the replication engine, and
//! empirical checks of the theory.

mod checks;
mod population;
mod presets;
mod replicate;
mod response;

pub use checks::{
    coefficient_order_norms, lemma1_check, population_regression, regression_fit_error,
    Lemma1Draw, Lemma1Report,
};
pub use population::{
    gen_population, linear_predictor_all_cells, sigmoid, CellDistribution, CoeffSpec,
    OutcomeGenerator, OutcomeSpec, PairTilt, Population,
};
pub use presets::{
    coverage_preset, forest_preset, fourth_order_preset, preset, scale_preset, survey_schema,
    survey_schema_fine_age, SimPreset,
};
pub use replicate::{
    oracle_ht, run_replications, EstimatorDef, EstimatorKind, EstimatorSuite, EstimatorSummary,
    ModelMethod, SimResult, WeightsMethod,
};
pub use response::{response_forest, response_logit, ResponseSpec, ResponseTable, PI_FLOOR};

use crate::design::build_design;
use crate::error::Result;

/// Run a preset end to end: generate the population, build the response
/// table, and run the replication engine. Returns the result together with
/// the response table (for overlap reporting).
pub fn run_preset(
    preset: &SimPreset,
    replications: usize,
    seed: u64,
) -> Result<(SimResult, ResponseTable)> {
    let needed_order = preset
        .suite
        .max_design_order()
        .max(response_order(&preset.response))
        .max(outcome_order(&preset.outcome));
    let design = build_design(&preset.schema, needed_order)?;
    let mut population = gen_population(
        &preset.schema,
        preset.population_size,
        &preset.dist,
        &preset.outcome,
        &design,
        seed,
    )?;
    if preset.freeze_outcomes {
        population.freeze_outcomes();
    }
    let response = preset.response.build(&population, &design)?;
    let result = run_replications(&population, &response.pi, &preset.suite, replications, seed)?;
    Ok((result, response))
}

fn response_order(spec: &ResponseSpec) -> usize {
    match spec {
        ResponseSpec::Logistic { coeffs, .. } => coeffs.max_order,
        ResponseSpec::Forest { base, .. } => base.max_order,
    }
}

fn outcome_order(spec: &OutcomeSpec) -> usize {
    match spec {
        OutcomeSpec::LinearNormal { coeffs, .. } | OutcomeSpec::LogisticBinary { coeffs } => {
            coeffs.max_order
        }
        _ => 1,
    }
}

//! Response-probability models for the simulation lab.

use super::population::{linear_predictor_all_cells, sigmoid, Population};
use crate::design::{decode_cell, CellTable, InteractionDesign};
use crate::error::{Error, Result};
use crate::outcomes::fit_bagged_trees;
use serde::{Deserialize, Serialize};

/// Forest response probabilities are clipped here to keep the overlap
/// assumption enforceable; clips are counted and reported.
pub const PI_FLOOR: f64 = 1e-4;

/// Per-cell response probabilities with provenance notes.
#[derive(Debug, Clone)]
pub struct ResponseTable {
    pub pi: Vec<f64>,
    pub min_pi: f64,
    pub mean_pi: f64,
    /// Number of cells clipped into `[PI_FLOOR, 1]` (forest model only).
    pub clipped: usize,
}

impl ResponseTable {
    fn from_pi(pi: Vec<f64>, clipped: usize) -> Self {
        let min_pi = pi.iter().copied().fold(f64::INFINITY, f64::min);
        let mean_pi = pi.iter().sum::<f64>() / pi.len() as f64;
        Self {
            pi,
            min_pi,
            mean_pi,
            clipped,
        }
    }
}

/// Logistic response over interaction features:
/// `pi(s) = logit^{-1}(scale * D_s . beta)`. A larger scale pushes
/// probabilities toward the extremes (poorer overlap).
pub fn response_logit(
    design: &InteractionDesign,
    coeffs: &[f64],
    max_order: usize,
    scale: f64,
) -> Result<ResponseTable> {
    let z = linear_predictor_all_cells(design, coeffs, max_order)?;
    Ok(ResponseTable::from_pi(
        z.iter().map(|&v| sigmoid(scale * v)).collect(),
        0,
    ))
}

/// Leaf-sharing response probabilities from a bagged-tree fit against a
/// reference respondent draw:
/// `pi(s) = (1/B) sum_b (sum_{s' in L_b(s)} n_{s'}) / |L_b(s)|`,
/// clipped into `[PI_FLOOR, 1]`.
pub fn response_forest(
    population: &Population,
    reference_draw: &[bool],
    b: usize,
    depth: usize,
    seed: u64,
) -> Result<ResponseTable> {
    if reference_draw.len() != population.size() {
        return Err(Error::Mismatch(
            "reference draw must flag every population unit".into(),
        ));
    }
    let schema = &population.schema;
    let j = schema.num_cells();
    let mut pop_counts = vec![0u64; j];
    let mut resp_counts = vec![0u64; j];
    for (&cell, &r) in population.cells.iter().zip(reference_draw) {
        pop_counts[cell as usize] += 1;
        if r {
            resp_counts[cell as usize] += 1;
        }
    }
    if resp_counts.iter().all(|&c| c == 0) {
        return Err(Error::Infeasible("reference draw has no respondents".into()));
    }

    // Trees predict the response rate: every populated cell is a training
    // point weighted by its population count, with the observed rate as the
    // target.
    let train = CellTable::from_counts(schema.clone(), pop_counts.clone(), pop_counts.clone())?
        .with_outcome_sums(resp_counts.iter().map(|&c| c as f64).collect(), None)?;
    let ensemble = fit_bagged_trees(&train, b, depth, seed)?;

    // Evaluate the leaf-sharing formula with the reference respondent
    // counts.
    let mut weighted_cells = Vec::new();
    for s in 0..j {
        if resp_counts[s] > 0 {
            weighted_cells.push((decode_cell(schema, s)?.levels, resp_counts[s] as f64));
        }
    }
    let masses = ensemble.accumulate_leaf_mass(&weighted_cells);
    let mut clipped = 0usize;
    let mut pi = Vec::with_capacity(j);
    for s in 0..j {
        let levels = decode_cell(schema, s)?.levels;
        let raw = ensemble.density_with_mass(&levels, &masses);
        let v = raw.clamp(PI_FLOOR, 1.0);
        if v != raw {
            clipped += 1;
        }
        pi.push(v);
    }
    Ok(ResponseTable::from_pi(pi, clipped))
}

/// Serializable response configuration for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseSpec {
    Logistic {
        coeffs: super::population::CoeffSpec,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Forest {
        /// Base logistic model generating the reference draw.
        base: super::population::CoeffSpec,
        #[serde(default = "default_scale")]
        base_scale: f64,
        trees: usize,
        depth: usize,
        seed: u64,
    },
}

fn default_scale() -> f64 {
    1.0
}

impl ResponseSpec {
    pub fn build(&self, population: &Population, design: &InteractionDesign) -> Result<ResponseTable> {
        match self {
            ResponseSpec::Logistic { coeffs, scale } => {
                let beta = coeffs.materialize(design)?;
                response_logit(design, &beta, coeffs.max_order, *scale)
            }
            ResponseSpec::Forest {
                base,
                base_scale,
                trees,
                depth,
                seed,
            } => {
                let beta = base.materialize(design)?;
                let base_pi = response_logit(design, &beta, base.max_order, *base_scale)?;
                // Reference draw from the base process, fixed by the seed.
                use rand::Rng;
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
                let draw: Vec<bool> = population
                    .cells
                    .iter()
                    .map(|&c| rng.gen::<f64>() < base_pi.pi[c as usize])
                    .collect();
                response_forest(population, &draw, *trees, *depth, *seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, decode_cell, CovariateSchema};
    use crate::simlab::population::{gen_population, CellDistribution, CoeffSpec, OutcomeSpec};
    use approx::assert_relative_eq;

    #[test]
    fn zero_coefficients_give_one_half() {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let coeffs = vec![0.0; design.total_columns()];
        let t = response_logit(&design, &coeffs, 2, 1.0).unwrap();
        for &p in &t.pi {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn intercept_only_matches_the_logistic_closed_form() {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let mut coeffs = vec![0.0; design.total_columns()];
        coeffs[0] = -2.0;
        let t = response_logit(&design, &coeffs, 2, 1.0).unwrap();
        for &p in &t.pi {
            assert_relative_eq!(p, 0.11920292202211755, epsilon = 1e-12);
        }
    }

    #[test]
    fn larger_scale_worsens_overlap() {
        let schema = CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap();
        let design = build_design(&schema, 3).unwrap();
        let coeffs = CoeffSpec {
            intercept: -1.0,
            max_order: 3,
            scale_by_order: vec![0.7, 0.4, 0.2],
            seed: 21,
        }
        .materialize(&design)
        .unwrap();
        let mild = response_logit(&design, &coeffs, 3, 1.0).unwrap();
        let harsh = response_logit(&design, &coeffs, 3, 3.0).unwrap();
        assert!(harsh.min_pi < mild.min_pi);
    }

    fn small_population() -> (Population, InteractionDesign) {
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let pop = gen_population(
            &schema,
            600,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::Constant { value: 0.0 },
            &design,
            17,
        )
        .unwrap();
        (pop, design)
    }

    #[test]
    fn single_root_leaf_gives_the_respondent_density() {
        let (pop, _design) = small_population();
        let draw: Vec<bool> = (0..pop.size()).map(|i| i % 4 == 0).collect();
        let t = response_forest(&pop, &draw, 1, 0, 5).unwrap();
        let n_resp = draw.iter().filter(|&&r| r).count() as f64;
        let expected = (n_resp / 6.0).clamp(PI_FLOOR, 1.0);
        for &p in &t.pi {
            assert_relative_eq!(p, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn stump_splits_density_into_two_constants() {
        // Sparse response on the x1 = 0 side only; a depth-1 tree splits on
        // x1 and the leaf-sharing density is constant within each side.
        let schema = CovariateSchema::from_level_counts(&[2, 12]).unwrap();
        let design = build_design(&schema, 1).unwrap();
        let pop = gen_population(
            &schema,
            600,
            &CellDistribution::uniform(&schema),
            &OutcomeSpec::Constant { value: 0.0 },
            &design,
            23,
        )
        .unwrap();
        let mut picked = 0usize;
        let draw: Vec<bool> = pop
            .cells
            .iter()
            .map(|&c| {
                let levels = decode_cell(&pop.schema, c as usize).unwrap().levels;
                if levels[0] == 0 && picked < 6 {
                    picked += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        let t = response_forest(&pop, &draw, 1, 1, 5).unwrap();
        // left region: x1 = 0 spans 12 cells holding all 6 respondents
        let left_cell = crate::design::encode_cell(&pop.schema, &[0, 4]).unwrap().index;
        assert_relative_eq!(t.pi[left_cell], 6.0 / 12.0, epsilon = 1e-12);
        let right_cell = crate::design::encode_cell(&pop.schema, &[1, 0]).unwrap().index;
        assert_eq!(t.pi[right_cell], PI_FLOOR);
        assert!(t.clipped >= 12);
    }

    #[test]
    fn probabilities_stay_in_bounds() {
        let (pop, _design) = small_population();
        let draw: Vec<bool> = (0..pop.size()).map(|i| i % 3 == 0).collect();
        let t = response_forest(&pop, &draw, 7, 2, 9).unwrap();
        for &p in &t.pi {
            assert!((PI_FLOOR..=1.0).contains(&p));
        }
    }
}

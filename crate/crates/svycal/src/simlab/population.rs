//! Synthetic finite populations with known cell structure.

use crate::design::{decode_cell, CellTable, CovariateSchema, InteractionDesign};
use crate::error::{Error, Result};
use crate::util::KahanSum;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Cell-probability model: independent covariates with given marginals plus
/// optional pairwise log-linear tilts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellDistribution {
    /// Per-covariate level probabilities (will be normalized).
    pub marginals: Vec<Vec<f64>>,
    pub tilts: Vec<PairTilt>,
}

/// Log-linear association between two covariates: adds
/// `strength * sign(a, b, x_a, x_b)` to the log cell probability, with a
/// deterministic +-1 pattern per level pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairTilt {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

fn tilt_sign(a: usize, b: usize, va: usize, vb: usize) -> f64 {
    // splitmix64 over the packed indices; parity decides the sign
    let mut z = (a as u64)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((b as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((va as u64) << 32)
        .wrapping_add(vb as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    if z & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl CellDistribution {
    pub fn uniform(schema: &CovariateSchema) -> Self {
        Self {
            marginals: schema
                .level_counts()
                .iter()
                .map(|&k| vec![1.0 / k as f64; k])
                .collect(),
            tilts: Vec::new(),
        }
    }

    /// Normalized probabilities over all J cells.
    pub fn cell_probabilities(&self, schema: &CovariateSchema) -> Result<Vec<f64>> {
        let counts = schema.level_counts();
        if self.marginals.len() != counts.len() {
            return Err(Error::Config("one marginal vector per covariate".into()));
        }
        for (m, &k) in self.marginals.iter().zip(&counts) {
            if m.len() != k || m.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::Config(
                    "marginals must be positive and match the level counts".into(),
                ));
            }
        }
        for t in &self.tilts {
            if t.a >= counts.len() || t.b >= counts.len() || t.a == t.b {
                return Err(Error::Config("tilt covariates out of range".into()));
            }
        }
        let j = schema.num_cells();
        let mut probs = Vec::with_capacity(j);
        let mut total = 0.0;
        for s in 0..j {
            let levels = decode_cell(schema, s)?.levels;
            let mut logp: f64 = levels
                .iter()
                .enumerate()
                .map(|(l, &v)| self.marginals[l][v].ln())
                .sum();
            for t in &self.tilts {
                logp += t.strength * tilt_sign(t.a, t.b, levels[t.a], levels[t.b]);
            }
            let p = logp.exp();
            probs.push(p);
            total += p;
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }
}

/// Coefficient recipe for logistic / linear cell models: the intercept is
/// explicit, every other design column of order `k` gets an independent
/// normal draw scaled by `scale_by_order[k-1]`. Deterministic given the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffSpec {
    pub intercept: f64,
    pub max_order: usize,
    pub scale_by_order: Vec<f64>,
    pub seed: u64,
}

impl CoeffSpec {
    pub fn materialize(&self, design: &InteractionDesign) -> Result<Vec<f64>> {
        if self.max_order > design.max_order() {
            return Err(Error::Mismatch(format!(
                "coefficients need order {}, design has {}",
                self.max_order,
                design.max_order()
            )));
        }
        if self.scale_by_order.len() < self.max_order {
            return Err(Error::Config("one coefficient scale per order".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = design.order_range(self.max_order).end;
        let mut coeffs = vec![0.0f64; m];
        coeffs[0] = self.intercept;
        for k in 1..=self.max_order {
            let scale = self.scale_by_order[k - 1];
            for c in design.order_range(k) {
                if c == 0 {
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                coeffs[c] = scale * z;
            }
        }
        Ok(coeffs)
    }
}

/// Outcome data-generating processes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeSpec {
    /// Every unit gets the same value.
    Constant { value: f64 },
    /// `Y = 1` exactly on the all-reference cell.
    ReferenceIndicator,
    /// `Y = D_s . eta + N(0, noise_sd^2)`, redrawn each replication.
    LinearNormal { coeffs: CoeffSpec, noise_sd: f64 },
    /// `Y ~ Bernoulli(logit^{-1}(D_s . eta))`, redrawn each replication.
    LogisticBinary { coeffs: CoeffSpec },
}

/// Materialized outcome model: per-cell expected values plus the draw rule.
#[derive(Debug, Clone)]
pub struct OutcomeGenerator {
    kind: GeneratorKind,
    /// Expected outcome per cell.
    pub cell_expectations: Vec<f64>,
}

#[derive(Debug, Clone)]
enum GeneratorKind {
    Deterministic,
    Normal { noise_sd: f64 },
    Bernoulli,
}

impl OutcomeGenerator {
    pub fn build(
        spec: &OutcomeSpec,
        schema: &CovariateSchema,
        design: &InteractionDesign,
    ) -> Result<Self> {
        let j = schema.num_cells();
        match spec {
            OutcomeSpec::Constant { value } => Ok(Self {
                kind: GeneratorKind::Deterministic,
                cell_expectations: vec![*value; j],
            }),
            OutcomeSpec::ReferenceIndicator => {
                let mut e = vec![0.0; j];
                e[0] = 1.0;
                Ok(Self {
                    kind: GeneratorKind::Deterministic,
                    cell_expectations: e,
                })
            }
            OutcomeSpec::LinearNormal { coeffs, noise_sd } => {
                if !(*noise_sd >= 0.0) {
                    return Err(Error::Config("noise_sd must be nonnegative".into()));
                }
                Ok(Self {
                    kind: GeneratorKind::Normal { noise_sd: *noise_sd },
                    cell_expectations: linear_predictor_all_cells(
                        design,
                        &coeffs.materialize(design)?,
                        coeffs.max_order,
                    )?,
                })
            }
            OutcomeSpec::LogisticBinary { coeffs } => {
                let z = linear_predictor_all_cells(
                    design,
                    &coeffs.materialize(design)?,
                    coeffs.max_order,
                )?;
                Ok(Self {
                    kind: GeneratorKind::Bernoulli,
                    cell_expectations: z.iter().map(|&v| sigmoid(v)).collect(),
                })
            }
        }
    }

    pub fn from_cell_values(values: Vec<f64>) -> Self {
        Self {
            kind: GeneratorKind::Deterministic,
            cell_expectations: values,
        }
    }

    /// True when replications should redraw outcomes rather than resample
    /// the base values.
    pub fn is_stochastic(&self) -> bool {
        !matches!(self.kind, GeneratorKind::Deterministic)
    }

    pub fn draw(&self, cell: usize, rng: &mut ChaCha8Rng) -> f64 {
        let e = self.cell_expectations[cell];
        match &self.kind {
            GeneratorKind::Deterministic => e,
            GeneratorKind::Normal { noise_sd } => {
                let z: f64 = rng.sample(StandardNormal);
                e + noise_sd * z
            }
            GeneratorKind::Bernoulli => {
                if rng.gen::<f64>() < e {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `D_s . eta` for every cell of the schema.
pub fn linear_predictor_all_cells(
    design: &InteractionDesign,
    coeffs: &[f64],
    max_order: usize,
) -> Result<Vec<f64>> {
    let schema = design.schema();
    let j = schema.num_cells();
    let mut z = Vec::with_capacity(j);
    for s in 0..j {
        let levels = decode_cell(schema, s)?.levels;
        z.push(
            design
                .cell_columns(&levels, max_order)
                .iter()
                .map(|&c| coeffs[c as usize])
                .sum(),
        );
    }
    Ok(z)
}

/// A synthetic finite population with its generating process attached.
#[derive(Debug, Clone)]
pub struct Population {
    pub schema: CovariateSchema,
    /// Cell per unit.
    pub cells: Vec<u32>,
    /// Outcome per unit, drawn at construction.
    pub base_outcomes: Vec<f64>,
    pub generator: OutcomeGenerator,
    /// Realized within-cell means of the base outcomes (NaN on empty cells).
    pub true_cell_means: Vec<f64>,
    pub cell_probs: Vec<f64>,
    pub warnings: Vec<String>,
    /// When false, replications resample the base outcomes instead of
    /// redrawing from the generator (deterministic-outcome designs).
    pub redraw_outcomes: bool,
}

impl Population {
    pub fn size(&self) -> usize {
        self.cells.len()
    }

    /// Freeze outcomes at their base draw; replications then carry each
    /// unit's outcome along when it is resampled.
    pub fn freeze_outcomes(&mut self) {
        self.redraw_outcomes = false;
    }

    /// Tabulate the base population (no respondents).
    pub fn base_table(&self) -> Result<CellTable> {
        let j = self.schema.num_cells();
        let mut pop = vec![0u64; j];
        for &c in &self.cells {
            pop[c as usize] += 1;
        }
        CellTable::from_counts(self.schema.clone(), pop, vec![0; j])
    }

    /// Base population mean.
    pub fn mean(&self) -> f64 {
        crate::util::ksum(self.base_outcomes.iter().copied()) / self.size() as f64
    }
}

/// Draw a population of `n_units` cells from the distribution and attach
/// outcomes. Deterministic given the seed; warns when `n_units < J`.
pub fn gen_population(
    schema: &CovariateSchema,
    n_units: usize,
    dist: &CellDistribution,
    outcome: &OutcomeSpec,
    design: &InteractionDesign,
    seed: u64,
) -> Result<Population> {
    if n_units == 0 {
        return Err(Error::Config("population size must be positive".into()));
    }
    let probs = dist.cell_probabilities(schema)?;
    let mut warnings = Vec::new();
    if n_units < schema.num_cells() {
        warnings.push(format!(
            "population size {} is below the cell count {}; many cells will be empty",
            n_units,
            schema.num_cells()
        ));
    }
    let generator = OutcomeGenerator::build(outcome, schema, design)?;

    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cum.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(n_units);
    let mut outcomes = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        let u: f64 = rng.gen::<f64>() * acc;
        let cell = cum.partition_point(|&c| c <= u).min(probs.len() - 1);
        cells.push(cell as u32);
        outcomes.push(generator.draw(cell, &mut rng));
    }

    let j = schema.num_cells();
    let mut sums = vec![KahanSum::new(); j];
    let mut counts = vec![0u64; j];
    for (&c, &y) in cells.iter().zip(&outcomes) {
        sums[c as usize].add(y);
        counts[c as usize] += 1;
    }
    let true_cell_means = (0..j)
        .map(|s| {
            if counts[s] > 0 {
                sums[s].value() / counts[s] as f64
            } else {
                f64::NAN
            }
        })
        .collect();

    Ok(Population {
        schema: schema.clone(),
        cells,
        base_outcomes: outcomes,
        redraw_outcomes: generator.is_stochastic(),
        generator,
        true_cell_means,
        cell_probs: probs,
        warnings,
    })
}

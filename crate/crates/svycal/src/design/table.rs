//! Tabulation of microdata into aligned population and respondent cell counts.

use super::schema::{collapse_schema, encode_cell, CovariateSchema};
use crate::error::{Error, Result};
use crate::util::KahanSum;

/// One microdata row: levels per covariate, respondent flag, optional outcome.
#[derive(Debug, Clone)]
pub struct MicroRow {
    pub levels: Vec<usize>,
    pub respondent: bool,
    pub outcome: Option<f64>,
}

/// Aligned population counts `N^P`, respondent counts `n^R`, and optional
/// per-cell outcome sums for one outcome variable.
#[derive(Debug, Clone)]
pub struct CellTable {
    schema: CovariateSchema,
    pop_counts: Vec<u64>,
    resp_counts: Vec<u64>,
    resp_sums: Option<Vec<f64>>,
    resp_sumsq: Option<Vec<f64>>,
}

impl CellTable {
    /// Assemble from pre-computed count vectors.
    pub fn from_counts(
        schema: CovariateSchema,
        pop_counts: Vec<u64>,
        resp_counts: Vec<u64>,
    ) -> Result<Self> {
        let j = schema.num_cells();
        if pop_counts.len() != j || resp_counts.len() != j {
            return Err(Error::Mismatch(format!(
                "count vectors must have length J = {}",
                j
            )));
        }
        let table = Self {
            schema,
            pop_counts,
            resp_counts,
            resp_sums: None,
            resp_sumsq: None,
        };
        table.validate()?;
        Ok(table)
    }

    /// Attach per-cell respondent outcome sums (and optionally sums of
    /// squares, needed for unit-level variance from aggregated data).
    pub fn with_outcome_sums(
        mut self,
        resp_sums: Vec<f64>,
        resp_sumsq: Option<Vec<f64>>,
    ) -> Result<Self> {
        let j = self.schema.num_cells();
        if resp_sums.len() != j || resp_sumsq.as_ref().is_some_and(|v| v.len() != j) {
            return Err(Error::Mismatch(format!("outcome sums must have length J = {}", j)));
        }
        for s in 0..j {
            if self.resp_counts[s] == 0 && resp_sums[s] != 0.0 {
                return Err(Error::Mismatch(format!(
                    "cell {} has outcome sum but no respondents",
                    s
                )));
            }
        }
        self.resp_sums = Some(resp_sums);
        self.resp_sumsq = resp_sumsq;
        Ok(self)
    }

    /// Replace the population side with counts from an external census file.
    pub fn with_pop_counts(mut self, pop_counts: Vec<u64>) -> Result<Self> {
        if pop_counts.len() != self.schema.num_cells() {
            return Err(Error::Mismatch("population counts must have length J".into()));
        }
        self.pop_counts = pop_counts;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.total_population() == 0 {
            return Err(Error::Ingestion {
                row: 0,
                message: "empty population".into(),
            });
        }
        if self.total_respondents() > self.total_population() {
            return Err(Error::Mismatch(format!(
                "respondents ({}) exceed population ({})",
                self.total_respondents(),
                self.total_population()
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn num_cells(&self) -> usize {
        self.schema.num_cells()
    }

    pub fn pop_counts(&self) -> &[u64] {
        &self.pop_counts
    }

    pub fn resp_counts(&self) -> &[u64] {
        &self.resp_counts
    }

    pub fn pop_count(&self, s: usize) -> u64 {
        self.pop_counts[s]
    }

    pub fn resp_count(&self, s: usize) -> u64 {
        self.resp_counts[s]
    }

    /// Total population size `N`.
    pub fn total_population(&self) -> u64 {
        self.pop_counts.iter().sum()
    }

    /// Total respondent count `n`.
    pub fn total_respondents(&self) -> u64 {
        self.resp_counts.iter().sum()
    }

    pub fn has_outcomes(&self) -> bool {
        self.resp_sums.is_some()
    }

    pub fn resp_sums(&self) -> Option<&[f64]> {
        self.resp_sums.as_deref()
    }

    pub fn resp_sumsq(&self) -> Option<&[f64]> {
        self.resp_sumsq.as_deref()
    }

    /// Respondent cell mean; `None` for cells without respondents or when
    /// no outcome was tabulated.
    pub fn cell_mean(&self, s: usize) -> Option<f64> {
        let sums = self.resp_sums.as_ref()?;
        if self.resp_counts[s] == 0 {
            return None;
        }
        Some(sums[s] / self.resp_counts[s] as f64)
    }

    /// Cells with at least one respondent.
    pub fn support_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_cells()).filter(|&s| self.resp_counts[s] > 0)
    }

    /// Cells with population mass.
    pub fn populated_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_cells()).filter(|&s| self.pop_counts[s] > 0)
    }

    /// Cells that enter any balance sum (population or respondent mass).
    pub fn active_cells(&self) -> Vec<usize> {
        (0..self.num_cells())
            .filter(|&s| self.pop_counts[s] > 0 || self.resp_counts[s] > 0)
            .collect()
    }

    /// Fraction of cells with population mass, reported alongside J since a
    /// large share of structural zeros is common in deep interactions.
    pub fn occupied_fraction(&self) -> f64 {
        self.populated_cells().count() as f64 / self.num_cells() as f64
    }

    /// Coarsen the table onto a collapsed schema, summing counts and sums.
    pub fn collapse(&self, groupings: &[Vec<usize>]) -> Result<CellTable> {
        let coarse = collapse_schema(&self.schema, groupings)?;
        let jc = coarse.num_cells();
        let mut pop = vec![0u64; jc];
        let mut resp = vec![0u64; jc];
        let mut sums = self.resp_sums.as_ref().map(|_| vec![0.0; jc]);
        let mut sumsq = self.resp_sumsq.as_ref().map(|_| vec![0.0; jc]);
        for s in 0..self.num_cells() {
            if self.pop_counts[s] == 0 && self.resp_counts[s] == 0 {
                continue;
            }
            let fine = super::schema::decode_cell(&self.schema, s)?;
            let mapped: Vec<usize> = fine
                .levels
                .iter()
                .enumerate()
                .map(|(l, &v)| groupings[l][v])
                .collect();
            let c = encode_cell(&coarse, &mapped)?.index;
            pop[c] += self.pop_counts[s];
            resp[c] += self.resp_counts[s];
            if let (Some(dst), Some(src)) = (sums.as_mut(), self.resp_sums.as_ref()) {
                dst[c] += src[s];
            }
            if let (Some(dst), Some(src)) = (sumsq.as_mut(), self.resp_sumsq.as_ref()) {
                dst[c] += src[s];
            }
        }
        let mut table = CellTable::from_counts(coarse, pop, resp)?;
        if let Some(sums) = sums {
            table = table.with_outcome_sums(sums, sumsq)?;
        }
        Ok(table)
    }
}

/// Count microdata rows into a [`CellTable`]. Outcomes must be present on
/// respondent rows either for all of them or for none (weight-only runs),
/// and never on non-respondent rows.
pub fn tabulate(schema: &CovariateSchema, rows: &[MicroRow]) -> Result<CellTable> {
    if rows.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            message: "empty population".into(),
        });
    }
    let j = schema.num_cells();
    let mut pop = vec![0u64; j];
    let mut resp = vec![0u64; j];
    let mut sums = vec![KahanSum::new(); j];
    let mut sumsq = vec![KahanSum::new(); j];
    let mut outcomes_seen = 0usize;
    let mut respondents = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let cell = encode_cell(schema, &row.levels).map_err(|e| Error::Ingestion {
            row: i + 1,
            message: e.to_string(),
        })?;
        pop[cell.index] += 1;
        if row.respondent {
            resp[cell.index] += 1;
            respondents += 1;
            if let Some(y) = row.outcome {
                if !y.is_finite() {
                    return Err(Error::Ingestion {
                        row: i + 1,
                        message: "non-finite outcome".into(),
                    });
                }
                sums[cell.index].add(y);
                sumsq[cell.index].add(y * y);
                outcomes_seen += 1;
            }
        } else if row.outcome.is_some() {
            return Err(Error::Ingestion {
                row: i + 1,
                message: "outcome on non-respondent row".into(),
            });
        }
    }
    if outcomes_seen > 0 && outcomes_seen != respondents {
        return Err(Error::Ingestion {
            row: 0,
            message: format!(
                "outcome present on {} of {} respondent rows; must be all or none",
                outcomes_seen, respondents
            ),
        });
    }
    let table = CellTable::from_counts(schema.clone(), pop, resp)?;
    if outcomes_seen > 0 {
        table.with_outcome_sums(
            sums.iter().map(KahanSum::value).collect(),
            Some(sumsq.iter().map(KahanSum::value).collect()),
        )
    } else {
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(levels: &[usize], respondent: bool, outcome: Option<f64>) -> MicroRow {
        MicroRow {
            levels: levels.to_vec(),
            respondent,
            outcome,
        }
    }

    #[test]
    fn counts_and_cell_mean() {
        let schema = CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap();
        let rows = vec![
            row(&[0, 0, 0], true, Some(1.0)),
            row(&[0, 0, 0], true, Some(0.0)),
            row(&[0, 0, 0], false, None),
        ];
        let t = tabulate(&schema, &rows).unwrap();
        assert_eq!(t.pop_count(0), 3);
        assert_eq!(t.resp_count(0), 2);
        assert_eq!(t.cell_mean(0), Some(0.5));
    }

    #[test]
    fn empty_population_errors() {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let err = tabulate(&schema, &[]).unwrap_err();
        assert!(err.to_string().contains("empty population"));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let rows = vec![row(&[0], false, None), row(&[5], false, None)];
        let err = tabulate(&schema, &rows).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{}", err);
    }

    #[test]
    fn pew_scale_totals() {
        // A population of 46,971 rows with 2,062 respondent flags.
        let schema = CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap();
        let rows: Vec<MicroRow> = (0..46_971)
            .map(|i| row(&[i % 2, (i / 2) % 4, (i / 8) % 3], i < 2_062, None))
            .collect();
        let t = tabulate(&schema, &rows).unwrap();
        assert_eq!(t.total_population(), 46_971);
        assert_eq!(t.total_respondents(), 2_062);
    }

    #[test]
    fn collapse_preserves_totals() {
        let schema = CovariateSchema::from_level_counts(&[2, 4]).unwrap();
        let rows: Vec<MicroRow> = (0..40)
            .map(|i| row(&[i % 2, i % 4], i % 5 == 0, Some(if i % 5 == 0 { 1.0 } else { 0.0 }).filter(|_| i % 5 == 0)))
            .collect();
        let t = tabulate(&schema, &rows).unwrap();
        let c = t.collapse(&[vec![0, 1], vec![0, 0, 1, 1]]).unwrap();
        assert_eq!(c.total_population(), t.total_population());
        assert_eq!(c.total_respondents(), t.total_respondents());
        assert_eq!(c.num_cells(), 4);
    }
}

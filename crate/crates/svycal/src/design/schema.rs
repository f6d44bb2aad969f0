//! Covariate schemas and mixed-radix cell encoding.
//!
//! A schema is an ordered list of categorical covariates. Every combination
//! of levels is a *cell*; cells are indexed `0..J` with `J` the product of
//! the level counts, the last covariate varying fastest. Level 0 of each
//! covariate is the reference level.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One categorical covariate: a name and its ordered level labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub labels: Vec<String>,
}

impl Covariate {
    pub fn levels(&self) -> usize {
        self.labels.len()
    }
}

/// Ordered categorical covariate layout. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSchema {
    covariates: Vec<Covariate>,
    /// Mixed-radix place values: `weights[l]` multiplies the level of
    /// covariate `l` in the cell index (last covariate fastest).
    #[serde(skip)]
    weights: Vec<usize>,
    #[serde(skip)]
    num_cells: usize,
}

impl CovariateSchema {
    pub fn new(covariates: Vec<Covariate>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Schema("schema needs at least one covariate".into()));
        }
        for c in &covariates {
            if c.levels() < 2 {
                return Err(Error::Schema(format!(
                    "covariate `{}` needs at least 2 levels, got {}",
                    c.name,
                    c.levels()
                )));
            }
            let mut seen = c.labels.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != c.labels.len() {
                return Err(Error::Schema(format!(
                    "covariate `{}` has duplicate level labels",
                    c.name
                )));
            }
        }
        let mut names: Vec<&str> = covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != covariates.len() {
            return Err(Error::Schema("duplicate covariate names".into()));
        }
        let mut s = Self {
            covariates,
            weights: Vec::new(),
            num_cells: 0,
        };
        s.rebuild_weights()?;
        Ok(s)
    }

    /// Shorthand used throughout tests: anonymous covariates with the given
    /// level counts and labels "0", "1", ...
    pub fn from_level_counts(counts: &[usize]) -> Result<Self> {
        let covariates = counts
            .iter()
            .enumerate()
            .map(|(i, &k)| Covariate {
                name: format!("x{}", i + 1),
                labels: (0..k).map(|v| v.to_string()).collect(),
            })
            .collect();
        Self::new(covariates)
    }

    /// Recompute place values; called after deserialization as well.
    pub(crate) fn rebuild_weights(&mut self) -> Result<usize> {
        let d = self.covariates.len();
        let mut weights = vec![0usize; d];
        let mut acc: usize = 1;
        for l in (0..d).rev() {
            weights[l] = acc;
            acc = acc.checked_mul(self.covariates[l].levels()).ok_or_else(|| {
                Error::Schema("cell count overflows usize".into())
            })?;
        }
        self.weights = weights;
        self.num_cells = acc;
        Ok(acc)
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    /// Number of covariates `d`.
    pub fn num_covariates(&self) -> usize {
        self.covariates.len()
    }

    /// Number of distinct cells `J`.
    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.covariates.iter().map(|c| c.levels()).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn level_index(&self, covariate: usize, label: &str) -> Option<usize> {
        self.covariates[covariate].labels.iter().position(|l| l == label)
    }
}

/// A cell: its flat index and the level tuple it encodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellId {
    pub index: usize,
    pub levels: Vec<usize>,
}

/// Mixed-radix encoding of a level tuple (last covariate fastest).
pub fn encode_cell(schema: &CovariateSchema, levels: &[usize]) -> Result<CellId> {
    if levels.len() != schema.num_covariates() {
        return Err(Error::Schema(format!(
            "expected {} levels, got {}",
            schema.num_covariates(),
            levels.len()
        )));
    }
    let mut index = 0usize;
    for (l, (&v, c)) in levels.iter().zip(schema.covariates()).enumerate() {
        if v >= c.levels() {
            return Err(Error::Schema(format!(
                "level index {} out of range for covariate `{}` ({} levels)",
                v,
                c.name,
                c.levels()
            )));
        }
        index += v * schema.weights[l];
    }
    Ok(CellId {
        index,
        levels: levels.to_vec(),
    })
}

/// Inverse of [`encode_cell`].
pub fn decode_cell(schema: &CovariateSchema, index: usize) -> Result<CellId> {
    if index >= schema.num_cells() {
        return Err(Error::Schema(format!(
            "cell index {} out of range (J = {})",
            index,
            schema.num_cells()
        )));
    }
    let mut rem = index;
    let levels = schema
        .weights
        .iter()
        .map(|&w| {
            let v = rem / w;
            rem %= w;
            v
        })
        .collect();
    Ok(CellId { index, levels })
}

/// Coarsen covariate levels. `groupings[l][old_level]` gives the new level of
/// covariate `l`; new levels must be `0..K_l` with every target hit at least
/// once. Labels of merged levels are joined with `+`.
pub fn collapse_schema(
    schema: &CovariateSchema,
    groupings: &[Vec<usize>],
) -> Result<CovariateSchema> {
    if groupings.len() != schema.num_covariates() {
        return Err(Error::Schema("one grouping per covariate required".into()));
    }
    let mut covariates = Vec::with_capacity(groupings.len());
    for (c, map) in schema.covariates().iter().zip(groupings) {
        if map.len() != c.levels() {
            return Err(Error::Schema(format!(
                "grouping for `{}` must map all {} levels",
                c.name,
                c.levels()
            )));
        }
        let new_count = map.iter().max().map_or(0, |m| m + 1);
        if new_count < 2 {
            return Err(Error::Schema(format!(
                "collapsed covariate `{}` needs at least 2 levels",
                c.name
            )));
        }
        let mut labels = vec![String::new(); new_count];
        for (old, &new) in map.iter().enumerate() {
            if new >= new_count {
                return Err(Error::Schema("grouping target out of range".into()));
            }
            if labels[new].is_empty() {
                labels[new] = c.labels[old].clone();
            } else {
                labels[new] = format!("{}+{}", labels[new], c.labels[old]);
            }
        }
        if labels.iter().any(String::is_empty) {
            return Err(Error::Schema(format!(
                "grouping for `{}` skips a target level",
                c.name
            )));
        }
        covariates.push(Covariate {
            name: c.name.clone(),
            labels,
        });
    }
    CovariateSchema::new(covariates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_243() -> CovariateSchema {
        CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap()
    }

    #[test]
    fn first_cell_is_zero() {
        let s = schema_243();
        assert_eq!(encode_cell(&s, &[0, 0, 0]).unwrap().index, 0);
    }

    #[test]
    fn mixed_radix_matches_hand_value() {
        // 1*12 + 3*3 + 2 = 23
        let s = schema_243();
        assert_eq!(encode_cell(&s, &[1, 3, 2]).unwrap().index, 23);
    }

    #[test]
    fn cell_count_is_level_product() {
        assert_eq!(schema_243().num_cells(), 24);
    }

    #[test]
    fn out_of_range_level_is_schema_violation() {
        let s = schema_243();
        assert!(matches!(
            encode_cell(&s, &[0, 4, 0]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn encode_decode_roundtrip_all_cells() {
        let s = schema_243();
        for idx in 0..s.num_cells() {
            let cell = decode_cell(&s, idx).unwrap();
            assert_eq!(encode_cell(&s, &cell.levels).unwrap().index, idx);
        }
    }

    #[test]
    fn collapse_merges_labels_and_counts_levels() {
        let s = schema_243();
        let collapsed =
            collapse_schema(&s, &[vec![0, 1], vec![0, 0, 1, 1], vec![0, 1, 1]]).unwrap();
        assert_eq!(collapsed.level_counts(), vec![2, 2, 2]);
        assert_eq!(collapsed.covariates()[1].labels[0], "0+1");
    }
}

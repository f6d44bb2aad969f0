//! Hierarchical interaction design matrices.
//!
//! For a schema with `d` covariates the assembled design
//! `D = [D^(1) .. D^(d)]` is a square `J x J` 0/1 matrix in reference-cell
//! coding: `D^(1)` holds the all-ones intercept column plus `J_l - 1`
//! indicator columns per covariate (reference level 0 dropped), and `D^(k)`
//! holds all products of non-reference indicator columns over covariate
//! subsets of size `k`. Rows are never stored densely; each cell's nonzero
//! columns are enumerated on demand or materialized as CSR for the cells a
//! solve actually touches.

use super::schema::{decode_cell, CovariateSchema};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;

/// Columns contributed by one covariate subset within an order block.
#[derive(Debug, Clone)]
pub struct ColumnGroup {
    /// Sorted covariate indices of the subset.
    pub covariates: Vec<usize>,
    /// Global column offset of the group.
    pub offset: usize,
    /// Number of columns: product of `J_l - 1` over the subset.
    pub width: usize,
}

/// All columns of one interaction order `k`.
#[derive(Debug, Clone)]
pub struct OrderBlock {
    pub order: usize,
    /// Global column offset of the block.
    pub offset: usize,
    /// `m_k`, the number of columns in the block.
    pub columns: usize,
    pub groups: Vec<ColumnGroup>,
    /// Covariate-subset bitmask -> index into `groups`.
    subset_lookup: HashMap<u64, usize>,
}

/// Sparse hierarchical design for orders `1..=max_order`.
#[derive(Debug, Clone)]
pub struct InteractionDesign {
    schema: CovariateSchema,
    max_order: usize,
    blocks: Vec<OrderBlock>,
    total_columns: usize,
}

/// Materialized sparse rows (CSR) for a chosen set of cells.
#[derive(Debug, Clone)]
pub struct CsrRows {
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
}

impl CsrRows {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn num_rows(&self) -> usize {
        self.indptr.len() - 1
    }
}

/// Rank and condition number of the assembled design.
#[derive(Debug, Clone, Copy)]
pub struct DesignDiagnostics {
    pub rank: usize,
    /// Ratio of the largest to the smallest singular value of `D`.
    pub condition_number: f64,
    /// True when rank < number of columns (possible for truncated designs
    /// restricted to observed cells; reported, never fatal).
    pub rank_deficient: bool,
}

/// Build the design for interaction orders `1..=max_order`.
pub fn build_design(schema: &CovariateSchema, max_order: usize) -> Result<InteractionDesign> {
    let d = schema.num_covariates();
    if max_order < 1 || max_order > d {
        return Err(Error::Config(format!(
            "max_order must be in 1..={}, got {}",
            d, max_order
        )));
    }
    if d > 60 {
        return Err(Error::Config("more than 60 covariates is unsupported".into()));
    }
    let extra: Vec<usize> = schema.level_counts().iter().map(|&j| j - 1).collect();
    let mut blocks = Vec::with_capacity(max_order);
    let mut offset = 0usize;
    for k in 1..=max_order {
        let block_offset = offset;
        let mut groups = Vec::new();
        let mut subset_lookup = HashMap::new();
        if k == 1 {
            // Intercept column leads the first-order block.
            groups.push(ColumnGroup {
                covariates: Vec::new(),
                offset,
                width: 1,
            });
            subset_lookup.insert(0u64, 0usize);
            offset += 1;
        }
        for subset in combinations(d, k) {
            let width = subset.iter().map(|&l| extra[l]).product();
            let mask = subset.iter().fold(0u64, |m, &l| m | (1 << l));
            subset_lookup.insert(mask, groups.len());
            groups.push(ColumnGroup {
                covariates: subset,
                offset,
                width,
            });
            offset += width;
        }
        blocks.push(OrderBlock {
            order: k,
            offset: block_offset,
            columns: offset - block_offset,
            groups,
            subset_lookup,
        });
    }
    Ok(InteractionDesign {
        schema: schema.clone(),
        max_order,
        blocks,
        total_columns: offset,
    })
}

/// Lexicographic k-subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        // Advance the rightmost index that can still move.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

impl InteractionDesign {
    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn blocks(&self) -> &[OrderBlock] {
        &self.blocks
    }

    pub fn block(&self, order: usize) -> &OrderBlock {
        &self.blocks[order - 1]
    }

    /// Total number of columns over all built orders.
    pub fn total_columns(&self) -> usize {
        self.total_columns
    }

    /// Column count `m_k` of one order.
    pub fn order_columns(&self, order: usize) -> usize {
        self.block(order).columns
    }

    /// Global column range `[offset, offset + m_k)` of one order.
    pub fn order_range(&self, order: usize) -> std::ops::Range<usize> {
        let b = self.block(order);
        b.offset..b.offset + b.columns
    }

    /// The order a global column index belongs to.
    pub fn column_order(&self, col: usize) -> usize {
        self.blocks
            .iter()
            .find(|b| col < b.offset + b.columns)
            .map(|b| b.order)
            .expect("column out of range")
    }

    /// Nonzero columns of row `s` up to `up_to_order`, in increasing column
    /// order. A row has `C(r_s, k)` ones in block `k`, where `r_s` counts the
    /// non-reference levels of the cell, plus the intercept.
    pub fn cell_columns(&self, levels: &[usize], up_to_order: usize) -> Vec<u32> {
        debug_assert!(up_to_order <= self.max_order);
        let extra: Vec<(usize, usize)> = levels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(l, &v)| (l, v))
            .collect();
        let r = extra.len();
        let mut cols: Vec<u32> = Vec::with_capacity(1 << r.min(20));
        cols.push(0); // intercept
        if r == 0 {
            return cols;
        }
        // Enumerate subsets of the active covariates grouped by size.
        for k in 1..=up_to_order.min(r) {
            let block = self.block(k);
            for subset in combinations(r, k) {
                let mask = subset.iter().fold(0u64, |m, &i| m | (1 << extra[i].0));
                let g = &block.groups[block.subset_lookup[&mask]];
                let mut col = g.offset;
                let mut w = 1usize;
                for &i in subset.iter().rev() {
                    let (l, v) = extra[i];
                    col += (v - 1) * w;
                    w *= self.schema.covariates()[l].levels() - 1;
                }
                cols.push(col as u32);
            }
        }
        cols.sort_unstable();
        cols
    }

    /// Materialize CSR rows for the given cells up to `up_to_order`.
    pub fn rows_for_cells(&self, cells: &[usize], up_to_order: usize) -> Result<CsrRows> {
        let mut indptr = Vec::with_capacity(cells.len() + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for &s in cells {
            let levels = decode_cell(&self.schema, s)?.levels;
            indices.extend(self.cell_columns(&levels, up_to_order));
            indptr.push(indices.len());
        }
        Ok(CsrRows { indptr, indices })
    }

    /// Human-readable label of a column, e.g. `intercept`, `age=30-44`,
    /// `age=30-44:party=ind`.
    pub fn column_label(&self, col: usize) -> String {
        for block in &self.blocks {
            if col < block.offset + block.columns {
                for g in &block.groups {
                    if col < g.offset + g.width {
                        if g.covariates.is_empty() {
                            return "intercept".into();
                        }
                        let mut rem = col - g.offset;
                        let mut parts = vec![String::new(); g.covariates.len()];
                        for (i, &l) in g.covariates.iter().enumerate().rev() {
                            let cov = &self.schema.covariates()[l];
                            let radix = cov.levels() - 1;
                            let v = rem % radix + 1;
                            rem /= radix;
                            parts[i] = format!("{}={}", cov.name, cov.labels[v]);
                        }
                        return parts.join(":");
                    }
                }
            }
        }
        format!("col{}", col)
    }

    /// Dense assembly of all J rows; test- and diagnostics-only.
    pub fn assemble_dense(&self) -> Result<DMatrix<f64>> {
        let j = self.schema.num_cells();
        if j > 4096 {
            return Err(Error::Config(format!(
                "dense assembly limited to J <= 4096 (J = {})",
                j
            )));
        }
        let mut m = DMatrix::zeros(j, self.total_columns);
        for s in 0..j {
            let levels = decode_cell(&self.schema, s)?.levels;
            for c in self.cell_columns(&levels, self.max_order) {
                m[(s, c as usize)] = 1.0;
            }
        }
        Ok(m)
    }
}

/// Rank and condition number of the assembled design. Dense SVD for
/// `J <= 2000`; for larger full-order designs the Kronecker factorization of
/// `D` into per-covariate blocks gives the exact singular-value extremes.
pub fn design_diagnostics(design: &InteractionDesign) -> Result<DesignDiagnostics> {
    let j = design.schema.num_cells();
    if j <= 2000 {
        let dense = design.assemble_dense()?;
        let cols = dense.ncols();
        let svd = dense.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let smax = sv[0];
        let tol = smax * (j.max(cols) as f64) * f64::EPSILON;
        let rank = sv.iter().filter(|&&s| s > tol).count();
        let smin = *sv.last().unwrap();
        let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        return Ok(DesignDiagnostics {
            rank,
            condition_number,
            rank_deficient: rank < cols,
        });
    }
    if design.max_order == design.schema.num_covariates() {
        // Full-order D is a column permutation of the Kronecker product of
        // the per-covariate [1 | indicators] factors, so singular values
        // (hence the condition number) multiply across covariates.
        let mut kappa = 1.0f64;
        for c in design.schema.covariates() {
            let jl = c.levels();
            let mut f = DMatrix::zeros(jl, jl);
            for r in 0..jl {
                f[(r, 0)] = 1.0;
                if r > 0 {
                    f[(r, r)] = 1.0;
                }
            }
            let svd = f.svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            kappa *= smax / smin;
        }
        return Ok(DesignDiagnostics {
            rank: j,
            condition_number: kappa,
            rank_deficient: false,
        });
    }
    Err(Error::Config(
        "diagnostics for truncated designs require J <= 2000".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn schema_243() -> CovariateSchema {
        CovariateSchema::from_level_counts(&[2, 4, 3]).unwrap()
    }

    #[test]
    fn block_sizes_match_reference_coding() {
        let d = build_design(&schema_243(), 3).unwrap();
        assert_eq!(d.order_columns(1), 7);
        assert_eq!(d.order_columns(2), 11);
        assert_eq!(d.order_columns(3), 6);
        assert_eq!(d.total_columns(), 24);
    }

    #[test]
    fn first_order_row_has_intercept_plus_active_levels() {
        let d = build_design(&schema_243(), 1).unwrap();
        assert_eq!(d.cell_columns(&[0, 0, 0], 1), vec![0]);
        // levels (1,3,2): intercept + one indicator per covariate
        assert_eq!(d.cell_columns(&[1, 3, 2], 1).len(), 4);
    }

    #[test]
    fn row_ones_count_is_binomial_in_active_levels() {
        let schema = CovariateSchema::from_level_counts(&[3, 2, 4, 2]).unwrap();
        let d = build_design(&schema, 4).unwrap();
        for s in 0..schema.num_cells() {
            let levels = decode_cell(&schema, s).unwrap().levels;
            let r = levels.iter().filter(|&&v| v > 0).count();
            for k in 1..=4usize {
                let range = d.order_range(k);
                let cols = d.cell_columns(&levels, 4);
                let in_block = cols
                    .iter()
                    .filter(|&&c| range.contains(&(c as usize)))
                    .count();
                let mut expected = binom(r, k);
                if k == 1 {
                    expected += 1; // intercept
                }
                assert_eq!(in_block, expected, "cell {} order {}", s, k);
            }
        }
    }

    fn binom(n: usize, k: usize) -> usize {
        if k > n {
            return 0;
        }
        let mut v = 1usize;
        for i in 0..k {
            v = v * (n - i) / (i + 1);
        }
        v
    }

    #[test]
    fn two_level_design_is_unit_lower_triangular() {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let d = build_design(&schema, 1).unwrap();
        let m = d.assemble_dense().unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(1, 1)], 1.0);
        let diag = design_diagnostics(&d).unwrap();
        assert_eq!(diag.rank, 2);
    }

    #[test]
    fn full_order_design_has_full_rank_j() {
        let d = build_design(&schema_243(), 3).unwrap();
        let diag = design_diagnostics(&d).unwrap();
        assert_eq!(diag.rank, 24);
        assert!(diag.condition_number.is_finite());
    }

    #[test]
    fn condition_number_matches_dense_svd_oracle() {
        // Independent oracle: brute-force dense columns, SVD via nalgebra.
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let d = build_design(&schema, 2).unwrap();
        let dense = oracle_dense(&schema);
        let svd = dense.svd(false, false);
        let kappa = svd.singular_values.max() / svd.singular_values.min();
        let diag = design_diagnostics(&d).unwrap();
        assert_relative_eq!(diag.condition_number, kappa, max_relative = 1e-10);
    }

    /// Brute-force dense full-order design, built independently of
    /// `InteractionDesign` internals: one column per (subset, level choice).
    fn oracle_dense(schema: &CovariateSchema) -> DMatrix<f64> {
        let j = schema.num_cells();
        let d = schema.num_covariates();
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; j]]; // intercept
        for k in 1..=d {
            for subset in combinations(d, k) {
                // every non-reference level choice over the subset
                let mut choices = vec![1usize; k];
                loop {
                    let mut col = vec![0.0; j];
                    for (s, val) in col.iter_mut().enumerate() {
                        let levels = decode_cell(schema, s).unwrap().levels;
                        if subset.iter().zip(&choices).all(|(&l, &v)| levels[l] == v) {
                            *val = 1.0;
                        }
                    }
                    cols.push(col);
                    // advance level choices (odometer)
                    let mut i = k;
                    loop {
                        if i == 0 {
                            break;
                        }
                        i -= 1;
                        choices[i] += 1;
                        if choices[i] < schema.covariates()[subset[i]].levels() {
                            break;
                        }
                        choices[i] = 1;
                        if i == 0 {
                            i = usize::MAX;
                            break;
                        }
                    }
                    if i == usize::MAX {
                        break;
                    }
                }
            }
        }
        DMatrix::from_fn(j, cols.len(), |r, c| cols[c][r])
    }

    #[test]
    fn kronecker_condition_number_agrees_with_dense() {
        let d = build_design(&schema_243(), 3).unwrap();
        let dense = design_diagnostics(&d).unwrap();
        // Product of per-covariate factor condition numbers.
        let mut kappa = 1.0;
        for c in d.schema().covariates() {
            let jl = c.levels();
            let mut f = DMatrix::zeros(jl, jl);
            for r in 0..jl {
                f[(r, 0)] = 1.0;
                if r > 0 {
                    f[(r, r)] = 1.0;
                }
            }
            let svd = f.svd(false, false);
            kappa *= svd.singular_values.max() / svd.singular_values.min();
        }
        assert_relative_eq!(dense.condition_number, kappa, max_relative = 1e-8);
    }

    #[test]
    fn column_labels_name_covariate_subsets() {
        let d = build_design(&schema_243(), 2).unwrap();
        assert_eq!(d.column_label(0), "intercept");
        assert_eq!(d.column_label(1), "x1=1");
        assert_eq!(d.column_label(2), "x2=1");
        // first second-order column pairs x1 and x2
        let c2 = d.order_range(2).start;
        assert_eq!(d.column_label(c2), "x1=1:x2=1");
    }

    #[test]
    fn truncated_design_keeps_only_low_orders() {
        let d = build_design(&schema_243(), 2).unwrap();
        assert_eq!(d.total_columns(), 18);
        let diag = design_diagnostics(&d).unwrap();
        assert_eq!(diag.rank, 18);
        assert!(!diag.rank_deficient);
    }
}

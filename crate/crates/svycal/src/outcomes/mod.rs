//! Outcome models producing per-cell predictions for MRP and DRP.

mod linear;
mod smoother;
mod trees;

pub use linear::{
    adjusted_weights, fit_map_linear, fit_ridge, fit_ridge_cv, population_feature_mean,
    LinearModel, PriorCovariance,
};
pub use smoother::{smoother_predict, SmootherSpec};
pub use trees::{fit_bagged_trees, TreeEnsemble};

use crate::design::{decode_cell, CellTable, InteractionDesign};
use crate::error::{Error, Result};

/// Model family tag, carried through reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ridge,
    MapLinear,
    Smoother,
    BaggedTrees,
    Constant,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ridge => "ridge",
            ModelKind::MapLinear => "map_linear",
            ModelKind::Smoother => "smoother",
            ModelKind::BaggedTrees => "bagged_trees",
            ModelKind::Constant => "constant",
        }
    }
}

/// A fitted outcome model. Linear kinds and trees extrapolate to every cell
/// through their features or splits; pure smoothers may be undefined on
/// cells without the data their rows need, which surfaces as an error.
#[derive(Debug, Clone)]
pub enum OutcomeModel {
    Ridge(LinearModel),
    MapLinear(LinearModel),
    Smoother(SmootherSpec),
    BaggedTrees(TreeEnsemble),
    Constant(f64),
}

impl OutcomeModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            OutcomeModel::Ridge(_) => ModelKind::Ridge,
            OutcomeModel::MapLinear(_) => ModelKind::MapLinear,
            OutcomeModel::Smoother(_) => ModelKind::Smoother,
            OutcomeModel::BaggedTrees(_) => ModelKind::BaggedTrees,
            OutcomeModel::Constant(_) => ModelKind::Constant,
        }
    }

    /// Prediction `mu_s` for one cell.
    pub fn predict_cell(
        &self,
        design: &InteractionDesign,
        table: &CellTable,
        cell: usize,
    ) -> Result<f64> {
        match self {
            OutcomeModel::Ridge(m) | OutcomeModel::MapLinear(m) => {
                let levels = decode_cell(design.schema(), cell)?.levels;
                Ok(m.predict(design, &levels))
            }
            OutcomeModel::Smoother(spec) => smoother_predict(spec, table, cell),
            OutcomeModel::BaggedTrees(t) => {
                let levels = decode_cell(design.schema(), cell)?.levels;
                Ok(t.predict(&levels))
            }
            OutcomeModel::Constant(c) => Ok(*c),
        }
    }

    /// Predictions for a set of cells; fails loudly on any cell the model
    /// cannot cover.
    pub fn predict_cells(
        &self,
        design: &InteractionDesign,
        table: &CellTable,
        cells: &[usize],
    ) -> Result<Vec<f64>> {
        cells
            .iter()
            .map(|&s| {
                self.predict_cell(design, table, s).map_err(|e| {
                    Error::Estimation(format!("model cannot predict cell {}: {}", s, e))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, tabulate, CovariateSchema, MicroRow};
    use approx::assert_relative_eq;

    fn binary_table() -> (InteractionDesign, CellTable) {
        let schema = CovariateSchema::from_level_counts(&[2]).unwrap();
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(MicroRow {
                levels: vec![0],
                respondent: true,
                outcome: Some(if i < 6 { 1.0 } else { 0.0 }),
            });
        }
        for i in 0..5 {
            rows.push(MicroRow {
                levels: vec![1],
                respondent: true,
                outcome: Some(if i < 1 { 1.0 } else { 0.0 }),
            });
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 1).unwrap();
        (design, table)
    }

    #[test]
    fn saturated_unpenalized_ridge_reproduces_group_means() {
        let (design, table) = binary_table();
        let model = fit_ridge(&design, &table, 1, 0.0).unwrap();
        let om = OutcomeModel::Ridge(model);
        assert_relative_eq!(om.predict_cell(&design, &table, 0).unwrap(), 0.6, epsilon = 1e-10);
        assert_relative_eq!(om.predict_cell(&design, &table, 1).unwrap(), 0.2, epsilon = 1e-10);
    }

    #[test]
    fn huge_penalty_collapses_to_the_margin_fit() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let mut rows = Vec::new();
        let data = [(0, 0, 1.0, 4u64), (0, 1, 2.0, 3), (1, 0, 3.0, 5), (1, 1, 7.0, 2)];
        for &(a, b, y, k) in &data {
            for _ in 0..k {
                rows.push(MicroRow {
                    levels: vec![a, b],
                    respondent: true,
                    outcome: Some(y),
                });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let big = fit_ridge(&design, &table, 2, 1e12).unwrap();
        let margins_only = fit_ridge(&design, &table, 1, 0.0).unwrap();
        for s in 0..4 {
            let lv = decode_cell(&schema, s).unwrap().levels;
            assert_relative_eq!(
                big.predict(&design, &lv),
                margins_only.predict(&design, &lv),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn ridge_matches_dense_normal_equation_oracle() {
        // Independent oracle: assemble the dense design, solve the penalized
        // normal equations with nalgebra's QR-less generic solver.
        use nalgebra::{DMatrix, DVector};
        let schema = CovariateSchema::from_level_counts(&[2, 3]).unwrap();
        let mut rows = Vec::new();
        let data = [
            (0, 0, 0.3, 4u64),
            (0, 1, 1.9, 2),
            (0, 2, -0.4, 3),
            (1, 0, 2.2, 1),
            (1, 1, 0.0, 5),
            (1, 2, 1.1, 2),
        ];
        for &(a, b, y, k) in &data {
            for _ in 0..k {
                rows.push(MicroRow {
                    levels: vec![a, b],
                    respondent: true,
                    outcome: Some(y),
                });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let penalty = 0.7;
        let model = fit_ridge(&design, &table, 2, penalty).unwrap();

        let dense = design.assemble_dense().unwrap();
        let m = dense.ncols();
        let j = table.num_cells();
        let mut gram = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for s in 0..j {
            let n = table.resp_count(s) as f64;
            if n == 0.0 {
                continue;
            }
            let x = dense.row(s).transpose();
            gram += n * &x * x.transpose();
            rhs += n * table.cell_mean(s).unwrap() * &x;
        }
        for c in design.order_range(2) {
            gram[(c, c)] += penalty;
        }
        let eta = gram.svd(true, true).solve(&rhs, 1e-14).unwrap();
        for c in 0..m {
            assert_relative_eq!(model.eta[c], eta[c], epsilon = 1e-8);
        }
        assert!(model.gradient_norm(&design, &table).unwrap() <= 1e-8);
    }

    #[test]
    fn map_with_flat_prior_saturated_gives_cell_means() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let mut rows = Vec::new();
        let data = [(0, 0, 1.0, 4u64), (0, 1, 2.0, 3), (1, 0, 3.0, 5), (1, 1, 7.0, 2)];
        for &(a, b, y, k) in &data {
            for _ in 0..k {
                rows.push(MicroRow {
                    levels: vec![a, b],
                    respondent: true,
                    outcome: Some(y),
                });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let prior = PriorCovariance::per_order(vec![0.0, 0.0]).unwrap();
        let model = fit_map_linear(&design, &table, 2, &prior).unwrap();
        for (s, &(_, _, y, _)) in data.iter().enumerate() {
            let lv = decode_cell(&schema, s).unwrap().levels;
            assert_relative_eq!(model.predict(&design, &lv), y, epsilon = 1e-8);
        }
    }

    #[test]
    fn map_matches_ridge_under_the_parameter_mapping() {
        let schema = CovariateSchema::from_level_counts(&[2, 2]).unwrap();
        let mut rows = Vec::new();
        let data = [(0, 0, 1.0, 4u64), (0, 1, 2.0, 3), (1, 0, 3.0, 5), (1, 1, 7.0, 2)];
        for &(a, b, y, k) in &data {
            for _ in 0..k {
                rows.push(MicroRow {
                    levels: vec![a, b],
                    respondent: true,
                    outcome: Some(y),
                });
            }
        }
        let table = tabulate(&schema, &rows).unwrap();
        let design = build_design(&schema, 2).unwrap();
        let penalty = 2.5;
        let ridge = fit_ridge(&design, &table, 2, penalty).unwrap();
        let prior = PriorCovariance::per_order(vec![0.0, penalty]).unwrap();
        let map = fit_map_linear(&design, &table, 2, &prior).unwrap();
        for c in 0..design.total_columns() {
            assert_relative_eq!(ridge.eta[c], map.eta[c], epsilon = 1e-10);
        }
    }
}

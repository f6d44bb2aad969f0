//! Cell smoothers: predictions as weighted combinations of respondent cell
//! totals, `mu_s = sum_{s'} W(s, s') n_{s'} Ybar_{s'}`.

use crate::design::CellTable;
use crate::error::{Error, Result};

/// Descriptor of the smoother matrix `W`.
#[derive(Debug, Clone)]
pub enum SmootherSpec {
    /// `W = diag(1 / n^R)`: each cell predicts its own respondent mean.
    /// Undefined on cells without respondents.
    DiagonalInverseCounts,
    /// `W(s, .) = 1/n` over respondents: every cell predicts the global
    /// respondent mean.
    UniformRespondent,
    /// Explicit sparse rows indexed by cell: `rows[s]` lists
    /// `(source cell, weight)`. A missing or empty row is undefined.
    Rows(Vec<Vec<(usize, f64)>>),
}

/// Prediction for one cell; errors when the row is undefined there.
pub fn smoother_predict(spec: &SmootherSpec, table: &CellTable, cell: usize) -> Result<f64> {
    let sums = table
        .resp_sums()
        .ok_or_else(|| Error::Estimation("outcome sums required for smoothing".into()))?;
    match spec {
        SmootherSpec::DiagonalInverseCounts => {
            let n = table.resp_count(cell);
            if n == 0 {
                return Err(Error::Estimation(format!(
                    "smoother row undefined on cell {} (no respondents)",
                    cell
                )));
            }
            Ok(sums[cell] / n as f64)
        }
        SmootherSpec::UniformRespondent => {
            let n = table.total_respondents();
            if n == 0 {
                return Err(Error::Estimation("no respondents".into()));
            }
            let total: f64 = table.support_cells().map(|s| sums[s]).sum();
            Ok(total / n as f64)
        }
        SmootherSpec::Rows(rows) => {
            let row = rows
                .get(cell)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| {
                    Error::Estimation(format!("smoother row undefined on cell {}", cell))
                })?;
            let mut acc = 0.0;
            for &(src, w) in row {
                acc += w * sums[src];
            }
            Ok(acc)
        }
    }
}

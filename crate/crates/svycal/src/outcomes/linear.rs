//! Penalized linear outcome models on interaction features.
//!
//! Both the ridge fit and the MAP multilevel fit minimize
//! `sum_s n_s (Ybar_s - D_s . eta)^2 + eta' Q eta` over the features of
//! orders `1..=K`; ridge uses `Q = penalty` on every block of order >= 2
//! (intercept and margins unpenalized), the MAP fit takes per-order prior
//! scalars. Small systems are solved by dense Cholesky, large ones by
//! Jacobi-preconditioned conjugate gradients on the same normal equations.

use crate::design::{CellTable, CsrRows, InteractionDesign};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DENSE_LIMIT: usize = 800;

/// Block-diagonal prior precision over design columns, one nonnegative
/// scalar per order (`q[0]` covers the intercept and margins; zero means a
/// flat prior there).
#[derive(Debug, Clone)]
pub struct PriorCovariance {
    pub q: Vec<f64>,
}

impl PriorCovariance {
    pub fn per_order(q: Vec<f64>) -> Result<Self> {
        if q.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Config("prior scalars must be nonnegative".into()));
        }
        Ok(Self { q })
    }

    fn for_order(&self, order: usize) -> f64 {
        self.q.get(order - 1).copied().unwrap_or(0.0)
    }
}

/// Fitted linear model: coefficients over design columns of orders `<= K`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub eta: Vec<f64>,
    pub feature_order: usize,
    /// Per-column penalty diagonal used in the fit; the adjusted-weight form
    /// reuses exactly this system.
    penalty_diag: Vec<f64>,
}

/// `(D' diag(n) D + Q)` over the respondent support, behind a dense or
/// iterative solve depending on size.
struct GramSystem {
    rows: CsrRows,
    n: Vec<f64>,
    penalty_diag: Vec<f64>,
    dense: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl GramSystem {
    fn build(rows: CsrRows, n: Vec<f64>, penalty_diag: Vec<f64>) -> Result<Self> {
        let m = penalty_diag.len();
        let dense = if m <= DENSE_LIMIT {
            let mut gram = DMatrix::zeros(m, m);
            for i in 0..rows.num_rows() {
                let row = rows.row(i);
                for &c1 in row {
                    for &c2 in row {
                        gram[(c1 as usize, c2 as usize)] += n[i];
                    }
                }
            }
            for c in 0..m {
                gram[(c, c)] += penalty_diag[c];
            }
            Some(gram.cholesky().ok_or_else(|| {
                Error::Estimation("singular normal equations; use a positive penalty".into())
            })?)
        } else {
            None
        };
        Ok(Self {
            rows,
            n,
            penalty_diag,
            dense,
        })
    }

    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        for (o, (&p, &x)) in out.iter_mut().zip(self.penalty_diag.iter().zip(v)) {
            *o = p * x;
        }
        for i in 0..self.rows.num_rows() {
            let row = self.rows.row(i);
            let dot: f64 = row.iter().map(|&c| v[c as usize]).sum();
            let w = self.n[i] * dot;
            if w != 0.0 {
                for &c in row {
                    out[c as usize] += w;
                }
            }
        }
    }

    fn solve(&self, rhs: Vec<f64>) -> Result<Vec<f64>> {
        if let Some(chol) = &self.dense {
            return Ok(chol.solve(&DVector::from_vec(rhs)).as_slice().to_vec());
        }
        // Jacobi-preconditioned CG.
        let m = rhs.len();
        let mut diag = self.penalty_diag.clone();
        for i in 0..self.rows.num_rows() {
            for &c in self.rows.row(i) {
                diag[c as usize] += self.n[i];
            }
        }
        let mut x = vec![0.0f64; m];
        let mut r = rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di.max(1e-300)).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs_norm = crate::util::norm2(&rhs).max(1e-300);
        let mut ap = vec![0.0f64; m];
        for _ in 0..20_000 {
            if crate::util::norm2(&r) <= 1e-12 * rhs_norm {
                break;
            }
            self.matvec(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::Estimation(
                    "indefinite normal equations; use a positive penalty".into(),
                ));
            }
            let alpha = rz / pap;
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..m {
                z[i] = r[i] / diag[i].max(1e-300);
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
        }
        Ok(x)
    }
}

impl LinearModel {
    pub fn predict(&self, design: &InteractionDesign, levels: &[usize]) -> f64 {
        design
            .cell_columns(levels, self.feature_order)
            .iter()
            .map(|&c| self.eta[c as usize])
            .sum()
    }

    /// l2 norm of the objective gradient at the fitted coefficients
    /// (normal-equation residual check).
    pub fn gradient_norm(&self, design: &InteractionDesign, table: &CellTable) -> Result<f64> {
        let (rows, support, n, targets) = support_rows(design, table, self.feature_order)?;
        let m = design.order_range(self.feature_order).end;
        let mut g = vec![0.0f64; m];
        for i in 0..support.len() {
            let row = rows.row(i);
            let pred: f64 = row.iter().map(|&c| self.eta[c as usize]).sum();
            let coef = -2.0 * n[i] * (targets[i] - pred);
            for &c in row {
                g[c as usize] += coef;
            }
        }
        for c in 0..m {
            g[c] += 2.0 * self.penalty_diag[c] * self.eta[c];
        }
        Ok(crate::util::norm2(&g))
    }
}

/// Design rows, counts, and cell-mean targets over the respondent support.
fn support_rows(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
) -> Result<(CsrRows, Vec<usize>, Vec<f64>, Vec<f64>)> {
    if order > design.max_order() {
        return Err(Error::Mismatch(format!(
            "model order {} exceeds design order {}",
            order,
            design.max_order()
        )));
    }
    let sums = table
        .resp_sums()
        .ok_or_else(|| Error::Estimation("outcome sums required to fit a model".into()))?;
    let support: Vec<usize> = table.support_cells().collect();
    let rows = design.rows_for_cells(&support, order)?;
    let n: Vec<f64> = support.iter().map(|&s| table.resp_count(s) as f64).collect();
    let targets: Vec<f64> = support
        .iter()
        .enumerate()
        .map(|(i, &s)| sums[s] / n[i])
        .collect();
    Ok((rows, support, n, targets))
}

fn penalty_diagonal(
    design: &InteractionDesign,
    order: usize,
    per_order: &dyn Fn(usize) -> f64,
) -> Vec<f64> {
    let m = design.order_range(order).end;
    let mut diag = vec![0.0f64; m];
    for k in 1..=order {
        let q = per_order(k);
        for c in design.order_range(k) {
            diag[c] = q;
        }
    }
    diag
}

fn fit_linear(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
    penalty_diag: Vec<f64>,
) -> Result<LinearModel> {
    let (rows, _support, n, targets) = support_rows(design, table, order)?;
    let m = penalty_diag.len();
    let mut rhs = vec![0.0f64; m];
    for i in 0..rows.num_rows() {
        let w = n[i] * targets[i];
        for &c in rows.row(i) {
            rhs[c as usize] += w;
        }
    }
    let system = GramSystem::build(rows, n, penalty_diag)?;
    let eta = system.solve(rhs)?;
    Ok(LinearModel {
        eta,
        feature_order: order,
        penalty_diag: system.penalty_diag,
    })
}

/// Ridge regression of cell means on interaction features of orders
/// `1..=order`; the intercept and first-order block are unpenalized.
pub fn fit_ridge(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
    penalty: f64,
) -> Result<LinearModel> {
    if penalty.is_nan() || penalty < 0.0 {
        return Err(Error::Config("ridge penalty must be nonnegative".into()));
    }
    let diag = penalty_diagonal(design, order, &|k| if k >= 2 { penalty } else { 0.0 });
    fit_linear(design, table, order, diag)
}

/// MAP estimate of the multilevel linear model with per-order prior
/// precision `Q` (block-diagonal, `q_k` times the identity).
pub fn fit_map_linear(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
    prior: &PriorCovariance,
) -> Result<LinearModel> {
    let diag = penalty_diagonal(design, order, &|k| prior.for_order(k));
    fit_linear(design, table, order, diag)
}

/// Ridge penalty selection by seeded 5-fold cross-validation over respondent
/// cells. Returns the refitted model, the chosen penalty, and the fold
/// assignment that was used.
pub fn fit_ridge_cv(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
    grid: &[f64],
    seed: u64,
) -> Result<(LinearModel, f64, Vec<usize>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let (rows, support, n, targets) = support_rows(design, table, order)?;
    let folds = 5usize.min(support.len());
    let mut order_perm: Vec<usize> = (0..support.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order_perm.shuffle(&mut rng);
    let mut fold_of = vec![0usize; support.len()];
    for (rank, &i) in order_perm.iter().enumerate() {
        fold_of[i] = rank % folds;
    }

    let mut best = (f64::INFINITY, grid[0]);
    for &penalty in grid {
        let penalty_diag =
            penalty_diagonal(design, order, &|k| if k >= 2 { penalty } else { 0.0 });
        let mut cv_err = 0.0f64;
        let mut ok = true;
        for fold in 0..folds {
            let mut n_train = n.clone();
            for i in 0..support.len() {
                if fold_of[i] == fold {
                    n_train[i] = 0.0;
                }
            }
            let m = penalty_diag.len();
            let mut rhs = vec![0.0f64; m];
            for i in 0..rows.num_rows() {
                let w = n_train[i] * targets[i];
                if w != 0.0 {
                    for &c in rows.row(i) {
                        rhs[c as usize] += w;
                    }
                }
            }
            let system = match GramSystem::build(rows.clone(), n_train, penalty_diag.clone()) {
                Ok(s) => s,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            match system.solve(rhs) {
                Ok(eta) => {
                    for i in 0..support.len() {
                        if fold_of[i] == fold {
                            let pred: f64 =
                                rows.row(i).iter().map(|&c| eta[c as usize]).sum();
                            cv_err += n[i] * (targets[i] - pred) * (targets[i] - pred);
                        }
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && cv_err < best.0 {
            best = (cv_err, penalty);
        }
    }
    let model = fit_ridge(design, table, order, best.1)?;
    Ok((model, best.1, fold_of))
}

/// DRP adjusted weights for a MAP-linear outcome model:
/// `gtilde(s) = ghat(s) + (N^P - diag(n) ghat)' D (D' diag(n) D + Q)^{-1} D_s`.
/// The returned vector covers every cell; weighting respondent outcomes by it
/// reproduces the DRP estimate, and entries may go negative (the model is
/// allowed to extrapolate).
pub fn adjusted_weights(
    model: &LinearModel,
    gamma: &[f64],
    design: &InteractionDesign,
    table: &CellTable,
) -> Result<Vec<f64>> {
    if gamma.len() != table.num_cells() {
        return Err(Error::Mismatch("weight vector must have length J".into()));
    }
    let order = model.feature_order;
    let m = design.order_range(order).end;
    if model.penalty_diag.len() != m {
        return Err(Error::Mismatch("model does not match this design".into()));
    }
    // rhs = D' (N^P - diag(n) gamma) over active cells.
    let mut rhs = vec![0.0f64; m];
    for s in table.active_cells() {
        let coef = table.pop_count(s) as f64 - table.resp_count(s) as f64 * gamma[s];
        if coef == 0.0 {
            continue;
        }
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, order) {
            rhs[c as usize] += coef;
        }
    }
    let support: Vec<usize> = table.support_cells().collect();
    let rows = design.rows_for_cells(&support, order)?;
    let n: Vec<f64> = support.iter().map(|&s| table.resp_count(s) as f64).collect();
    let system = GramSystem::build(rows, n, model.penalty_diag.clone())?;
    let v = system.solve(rhs)?;

    let mut adjusted = vec![0.0f64; table.num_cells()];
    for s in 0..table.num_cells() {
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        let shift: f64 = design
            .cell_columns(&levels, order)
            .iter()
            .map(|&c| v[c as usize])
            .sum();
        adjusted[s] = gamma[s] + shift;
    }
    Ok(adjusted)
}

/// Population-weighted feature mean `(1/N) sum_s N^P_s D_s`, so the MRP
/// estimate of a linear model is just `eta` dotted with this vector.
pub fn population_feature_mean(
    design: &InteractionDesign,
    table: &CellTable,
    order: usize,
) -> Result<Vec<f64>> {
    let m = design.order_range(order).end;
    let mut acc = vec![crate::util::KahanSum::new(); m];
    for s in table.populated_cells() {
        let w = table.pop_count(s) as f64;
        let levels = crate::design::decode_cell(design.schema(), s)?.levels;
        for c in design.cell_columns(&levels, order) {
            acc[c as usize].add(w);
        }
    }
    let n_total = table.total_population() as f64;
    Ok(acc.iter().map(|a| a.value() / n_total).collect())
}

//! Calibration weighting and doubly robust estimation for non-probability
//! survey samples.
//!
//! The library balances a respondent sample to a target population on all
//! interactions of categorical covariates: first-order margins are matched
//! exactly (raking), higher-order interactions approximately, with per-order
//! penalties trading balance against effective sample size. The weighted
//! estimate can then be bias-corrected with a pluggable outcome model
//! (double regression with post-stratification, DRP).
//!
//! The main pieces:
//!
//! * [`design`] — covariate schemas, cell encoding, tabulation, and the
//!   hierarchical interaction design matrices `D = [D^(1) .. D^(d)]`.
//! * [`solver`] — the calibration program solved through its Lagrangian
//!   dual, with primal recovery, KKT certification, and test oracles.
//! * [`estimators`] — weighted, MRP, and DRP point estimates, plug-in
//!   variance and confidence intervals, imbalance diagnostics, and the
//!   penalty-grid trade-off sweep.
//! * [`outcomes`] — outcome models producing cell predictions: penalized
//!   linear, MAP multilevel linear (with the adjusted-weight form), cell
//!   smoothers, and bagged regression trees.
//! * [`simlab`] — synthetic populations, response models, a replication
//!   engine, and empirical checks of the theoretical guarantees.
//! * [`cli`] — the command-line front end used by the `svycal` binary.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod cli;
pub mod design;
pub mod error;
pub mod estimators;
pub mod io;
pub mod outcomes;
pub mod simlab;
pub mod solver;
pub(crate) mod util;

pub use design::{build_design, tabulate, CellId, CellTable, CovariateSchema, InteractionDesign};
pub use error::{Error, Result};
pub use estimators::{EstimateReport, ImbalanceReport, TradeoffCurve};
pub use solver::{CalibrationSpec, DualSolution, SolveStatus, WeightSolution};

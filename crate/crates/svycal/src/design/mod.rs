//! Covariate schemas, cell encoding, tabulation, and interaction designs.

mod matrix;
mod schema;
mod table;

pub use matrix::{
    build_design, design_diagnostics, ColumnGroup, CsrRows, DesignDiagnostics, InteractionDesign,
    OrderBlock,
};
pub use schema::{collapse_schema, decode_cell, encode_cell, CellId, Covariate, CovariateSchema};
pub use table::{tabulate, CellTable, MicroRow};

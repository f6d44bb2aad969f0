//! CSV and JSON input/output.

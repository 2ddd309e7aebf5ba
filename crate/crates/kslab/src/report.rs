//! Shared formatting helpers for deterministic CSV/JSON output.
//!
//! All floating-point values are written with 17 significant digits so that
//! re-running a computation reproduces files byte for byte.

/// Scientific notation with 16 fractional digits (17 significant).
pub fn float17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Joins already-formatted fields into a CSV record.
pub fn csv_row(fields: &[String]) -> String {
    fields.join(",")
}

//! Scale-aware agreement checks between numeric results.
//!
//! Every equality claim in this crate ("recovered equals plain", "masked
//! forward equals scaled plain forward") is checked with the helpers here so
//! that all suites share one definition of relative error: largest absolute
//! entrywise difference divided by the largest magnitude present in either
//! operand. Measuring against the operand scale is the right yardstick for
//! results produced by cancellation, where individual entries can be
//! arbitrarily close to zero without carrying any extra information.

use crate::tensor::{Matrix, Vector};

/// Floor that keeps the all-zero comparison well-defined (0/floor = 0).
const SCALE_FLOOR: f64 = 1e-300;

/// Relative error between two slices of equal length.
///
/// Panics on length mismatch: callers compare results whose shapes were
/// already validated, so a mismatch here is a test-harness bug.
pub fn rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err_slices: length mismatch");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Relative error between two scalars.
pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    rel_err_slices(&[a], &[b])
}

/// Relative error between two matrices of identical shape.
pub fn rel_err_matrices(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(
        (a.rows(), a.cols()),
        (b.rows(), b.cols()),
        "rel_err_matrices: shape mismatch"
    );
    rel_err_slices(a.data(), b.data())
}

/// Relative error between two vectors of identical length.
pub fn rel_err_vectors(a: &Vector, b: &Vector) -> f64 {
    rel_err_slices(a.as_slice(), b.as_slice())
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff: length mismatch");
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_error() {
        assert_eq!(rel_err_slices(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(rel_err_slices(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn error_is_measured_against_operand_scale() {
        // Difference 1e-6 on operands of magnitude 100 → 1e-8 relative.
        let e = rel_err_slices(&[100.0, 0.0], &[100.0, 1e-6]);
        assert!((e - 1e-8).abs() < 1e-20, "{e}");
    }

    #[test]
    fn scalar_error_matches_slice_error() {
        assert_eq!(rel_err_scalar(2.0, 1.0), rel_err_slices(&[2.0], &[1.0]));
        assert_eq!(rel_err_scalar(2.0, 1.0), 0.5);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = [3.0, -1.0, 0.5];
        let b = [3.1, -1.2, 0.4];
        assert_eq!(rel_err_slices(&a, &b), rel_err_slices(&b, &a));
    }
}

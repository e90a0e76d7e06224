//! Fixtures shared by the benchmarks.

use eblup::{build_fay_herriot, build_nested_error, BalancedDesign, MixedModel};
use nalgebra::{DMatrix, DVector};

/// Fay-Herriot model with `t` areas, an intercept and one trend covariate,
/// `phi` cycling through 0.7, 1, 1.3.
pub fn fay_herriot(t: usize) -> MixedModel {
    let phi: Vec<f64> = (0..t).map(|i| [0.7, 1.0, 1.3][i % 3]).collect();
    let x = DMatrix::from_fn(t, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / t as f64 });
    build_fay_herriot(&phi, x).unwrap()
}

/// Nested-error model with `t` groups of `k` units and an intercept.
pub fn nested_error(t: usize, k: usize) -> MixedModel {
    let groups: Vec<usize> = (0..t * k).map(|i| i / k).collect();
    build_nested_error(&groups, DMatrix::from_element(t * k, 1, 1.0)).unwrap()
}

/// Two-way crossed design with interaction, `a x b` cells of `k` repetitions.
pub fn two_way(a: usize, b: usize, k: usize) -> BalancedDesign {
    BalancedDesign::new(vec![a, b, k], vec![0b110, 0b101, 0b100], 0b111).unwrap()
}

/// Deterministic pseudo-data of length `n`.
pub fn response(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| ((i as f64) * 1.618).sin() * 2.0 + 0.3 * (i % 5) as f64)
}

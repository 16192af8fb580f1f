//! Reference parameter sets used by tests, the acceptance battery and `verify`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{CoefficientCurves, MemoryParams};

/// Number of trading days in the reference price sample.
pub const REFERENCE_DAYS: usize = 2519;
/// Maximum lag used in the reference fit.
pub const REFERENCE_MAX_LAG: usize = 100;

/// Fitted volatility matrix of the three-stock reference sample, in percent per annum.
pub fn reference_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[28.7, -14.1, 9.1, 20.4, 22.3, 13.4, -1.8, -4.6, 24.9])
}

/// Fitted memory parameters of the reference sample (time unit: one trading day).
pub fn reference_memory() -> MemoryParams {
    MemoryParams::new(vec![0.086, 0.261, 0.076], vec![0.305, 0.044, 0.098]).expect("valid reference parameters")
}

/// The reference sample with all memory switched off.
pub fn reference_memoryless() -> MemoryParams {
    MemoryParams::memoryless(vec![0.305, 0.044, 0.098]).expect("valid reference parameters")
}

/// Two assets, memory in the first one only, relaxing coefficients.
pub fn two_asset() -> (MemoryParams, CoefficientCurves) {
    let params = MemoryParams::new(vec![0.5, 0.0], vec![0.5, 0.3]).expect("valid parameters");
    let sigma = DMatrix::from_row_slice(2, 2, &[0.25, 0.05, -0.04, 0.2]);
    let curves = CoefficientCurves::relaxing(0.03, 0.02, &[0.4, 0.1], &[0.3, 0.2], &sigma, 0.5)
        .expect("valid curves");
    (params, curves)
}

/// One asset with memory and constant coefficients.
pub fn single_asset() -> (MemoryParams, CoefficientCurves) {
    let params = MemoryParams::new(vec![0.6], vec![0.4]).expect("valid parameters");
    let sigma = DMatrix::from_element(1, 1, 0.2);
    let curves = CoefficientCurves::constant(0.02, &sigma, &[0.3]).expect("valid curves");
    (params, curves)
}

/// Memoryless market with constant coefficients and diagonal volatility.
pub fn merton(n: usize, r: f64, lambda: &[f64]) -> Result<(MemoryParams, CoefficientCurves)> {
    let params = MemoryParams::memoryless(vec![0.5; n])?;
    let sigma = DMatrix::from_fn(n, n, |i, j| if i == j { 0.2 + 0.05 * i as f64 } else { 0.0 });
    let curves = CoefficientCurves::constant(r, &sigma, lambda)?;
    Ok((params, curves))
}

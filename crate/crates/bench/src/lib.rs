//! Shared fixtures for the criterion benches.

use svv_core::{variance_from_vix, CorrectionGroups, HestonParams, VixMapping};

/// Effective Heston parameters with v0 implied by a spot VIX of 0.15.
pub fn params() -> HestonParams {
    let v0 = variance_from_vix(0.15, &VixMapping::new(15.0, 0.04).expect("valid mapping")).expect("feasible VIX");
    HestonParams::illustrative(v0)
}

/// A correction vector with every group switched on.
pub fn groups() -> CorrectionGroups {
    CorrectionGroups::from_array([0.004, -0.003, 0.002, 0.003, -0.004, 0.002, 0.001])
}

/// `n` equally spaced strikes across `[lo, hi]`.
pub fn strikes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

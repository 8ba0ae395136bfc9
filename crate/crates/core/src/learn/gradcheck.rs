//! Finite-difference verification of analytic gradients.
//!
//! Central differences at h = 1e−4 in `f64` resolve relative errors well
//! below the 1e−4 acceptance threshold used by the layer test suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Central-difference check of one coordinate.
///
/// `with_value` must set the coordinate to the given value, run the forward
/// pass and return the scalar loss. The coordinate is restored to `orig`
/// before returning.
pub fn check_coord(
    mut with_value: impl FnMut(f64) -> f64,
    orig: f64,
    analytic: f64,
    h: f64,
) -> f64 {
    let loss_plus = with_value(orig + h);
    let loss_minus = with_value(orig - h);
    with_value(orig);
    let numeric = (loss_plus - loss_minus) / (2.0 * h);
    relative_error(analytic, numeric)
}

/// Up to `k` distinct indices below `len`, in draw order.
pub fn sample_indices(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    let mut guard = 0;
    while out.len() < k.min(len) && guard < 100 * k {
        let idx = rng.gen_range(0..len);
        if !out.contains(&idx) {
            out.push(idx);
        }
        guard += 1;
    }
    out
}

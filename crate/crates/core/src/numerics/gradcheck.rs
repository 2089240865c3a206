use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// Used as the ground truth for every analytic backward pass in the crate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        if !plus.is_finite() {
            return Err(Error::Oracle {
                coordinate: i,
                value: plus,
            });
        }
        probe[i] = orig - h;
        let minus = f(&probe);
        if !minus.is_finite() {
            return Err(Error::Oracle {
                coordinate: i,
                value: minus,
            });
        }
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
        .sqrt();
    let scale = super::norm(a).max(super::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `max_i |a_i − b_i| / max_i max(|a_i|, |b_i|)`: elementwise discrepancy
/// measured against the largest entry, so near-zero entries do not blow up.
pub fn max_relative_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_relative_discrepancy length mismatch");
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

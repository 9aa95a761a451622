//! Finite-difference helpers shared by the gradient tests.

/// Relative error with a 1e-7 absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central difference of `f` at offset 0 with step `h`, or `None` when the
/// one-sided slopes disagree enough to indicate a ReLU kink inside `[-h, h]`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> Option<f64> {
    let (fm, f0, fp) = (f(-h), f(0.0), f(h));
    let (left, right) = ((f0 - fm) / h, (fp - f0) / h);
    if rel_err(left, right) > 1e-4 {
        None
    } else {
        Some((fp - fm) / (2.0 * h))
    }
}

//! Finite-difference gradient verification.
//!
//! The oracle only ever evaluates a black-box scalar function, so it stays
//! independent of the backward implementation it is used to check. All
//! arithmetic is f64; the recommended step is 1e-3 with central differences.

/// Central-difference gradient of `f` at `x`.
pub fn central_diff_grad<F>(f: &mut F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let fp = f(&point);
        point[i] = orig - step;
        let fm = f(&point);
        point[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between an analytic gradient and the
/// finite-difference estimate.
///
/// The floor turns the comparison into rtol/atol form: a tolerance of `t`
/// demands `|a - n| <= t * max(|a|, |n|, FLOOR)`, so components below the
/// floor are held to an absolute bound of `t * FLOOR`. Central differences
/// at step 1e-3 in f64 carry truncation noise around 1e-9 absolute, which
/// would otherwise swamp the relative error of near-zero gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-5;
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n, FLOOR))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: evaluates `f` both ways and returns the worst
/// relative disagreement with `analytic`.
pub fn check<F>(f: &mut F, x: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_diff_grad(f, x, step);
    max_rel_err(analytic, &numeric)
}

//! Central finite-difference gradient checking.

/// Absolute scale below which errors are measured absolutely rather than
/// relative to the gradient magnitude.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central difference `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every
/// coordinate.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, GRAD_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

/// Finite-difference check of `analytic` against `f` at `params`.
pub fn check(f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], h: f64) -> f64 {
    max_relative_error(analytic, &numerical_gradient(f, params, h))
}

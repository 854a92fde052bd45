//! Finite-difference reference derivatives.

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` at coordinate `i`.
pub fn central_difference<F>(mut f: F, x: &[f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps derivatives that are exactly zero analytically from
/// being judged against pure finite-difference round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let d0 = central_difference(f, &[2.0, -1.0], 0, 1e-5);
        assert!((d0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-12, 1e-6), 1e-6);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}

//! Adaptive Simpson quadrature on finite and semi-infinite intervals.

pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Integral over `[a, inf)` through the map `t = a + u / (1 - u)`.
pub fn integrate_to_infinity(f: &dyn Fn(f64) -> f64, a: f64, tol: f64) -> f64 {
    let g = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let w = 1.0 - u;
        let v = f(a + u / w) / (w * w);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate(&g, 0.0, 1.0, tol)
}

/// Integral over the whole real line, split at `center`.
pub fn integrate_real_line(f: &dyn Fn(f64) -> f64, center: f64, tol: f64) -> f64 {
    let right = integrate_to_infinity(&|t| f(center + (t)), 0.0, 0.5 * tol);
    let left = integrate_to_infinity(&|t| f(center - t), 0.0, 0.5 * tol);
    left + right
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let v = integrate(&|x| x * x * x, 0.0, 2.0, 1e-12);
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_on_line() {
        let v = integrate_real_line(&|x| (-x * x / 2.0).exp(), 0.0, 1e-11);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn exponential_tail() {
        let v = integrate_to_infinity(&|t| (-2.0 * t).exp(), 0.0, 1e-12);
        assert!((v - 0.5).abs() < 1e-9);
    }
}

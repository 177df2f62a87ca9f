//! Scalar numerical helpers: quadrature, root bracketing, golden-section search.

/// Adaptive Simpson quadrature of `f` over `[a, b]`. Reversed limits give the
/// negated integral.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if b < a {
        return -integrate(f, b, a, tol);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol.max(1e-15), 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
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
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Bisection for a nondecreasing `f` on a bracket with `f(lo) <= target <= f(hi)`.
/// Returns the smallest `x` (to tolerance) with `f(x) >= target`.
pub fn bisect_lower<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Largest `x` (to tolerance) with `f(x) <= target` for nondecreasing `f`.
pub fn bisect_upper<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Expands `[lo, hi]` geometrically around `center` until the nondecreasing
/// `f` brackets `target`, or `limit` is reached.
pub fn expand_bracket<F: Fn(f64) -> f64>(f: &F, target: f64, center: f64, limit: f64) -> Option<(f64, f64)> {
    let mut width = 1.0;
    let mut lo = center - width;
    let mut hi = center + width;
    loop {
        let flo = f(lo);
        let fhi = f(hi);
        if !flo.is_finite() || !fhi.is_finite() {
            return None;
        }
        if flo <= target && target <= fhi {
            return Some((lo, hi));
        }
        if width > limit {
            return None;
        }
        width *= 4.0;
        if flo > target {
            lo = center - width;
        }
        if fhi < target {
            hi = center + width;
        }
    }
}

/// Golden-section maximization of a unimodal `f` on `[a, b]`.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Central finite difference with step `1e-5 * max(1, |x|)`.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_and_kinks() {
        assert!((integrate(|s| s * s, 0.0, 2.0, 1e-12) - 8.0 / 3.0).abs() < 1e-12);
        assert!((integrate(|s| s.abs() * s, -1.0, 2.0, 1e-12) - 7.0 / 3.0).abs() < 1e-10);
        assert!((integrate(|s| s, 2.0, 0.0, 1e-12) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn bisection_handles_flat_sets() {
        let f = |x: f64| x.clamp(-1.0, 1.0);
        let lo = bisect_lower(f, 1.0, -10.0, 10.0);
        let hi = bisect_upper(f, 1.0, -10.0, 10.0);
        assert!((lo - 1.0).abs() < 1e-9);
        assert!((hi - 10.0).abs() < 1e-9);
    }

    #[test]
    fn bracket_expansion() {
        let f = |x: f64| x * x * x;
        let (lo, hi) = expand_bracket(&f, 1000.0, 0.0, 1e6).unwrap();
        assert!(f(lo) <= 1000.0 && f(hi) >= 1000.0);
        assert!(expand_bracket(&|_x: f64| 0.0, 1.0, 0.0, 1e3).is_none());
    }

    #[test]
    fn golden_section_finds_peak() {
        let (x, v) = golden_max(|x| -(x - 0.3) * (x - 0.3) + 2.0, -5.0, 5.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((v - 2.0).abs() < 1e-12);
    }
}

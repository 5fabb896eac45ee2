//! Exponential integrals `E1(t)` for `t > 0` and `Ei(x)` for `x < 0`.

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_CUTOFF: f64 = 1.0;
const MAX_TERMS: usize = 200;

/// `E1(t) = ∫_t^∞ e^{-s}/s ds` for `t > 0`.
///
/// Uses the convergent power series up to `t = 1` and a modified Lentz
/// evaluation of the continued fraction beyond. Returns `+inf` at `t = 0`
/// and `NaN` for negative or `NaN` input.
pub fn exp_integral_e1(t: f64) -> f64 {
    if t.is_nan() || t < 0.0 {
        return f64::NAN;
    }
    if t == 0.0 {
        return f64::INFINITY;
    }
    if t <= SERIES_CUTOFF {
        e1_series(t)
    } else {
        e1_continued_fraction(t)
    }
}

/// `Ei(x)` for `x < 0`, equal to `-E1(-x)`.
pub fn exp_integral_ei(x: f64) -> f64 {
    -exp_integral_e1(-x)
}

fn e1_series(t: f64) -> f64 {
    // E1(t) = -γ - ln t - Σ_{k≥1} (-t)^k / (k k!)
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..MAX_TERMS {
        let kf = k as f64;
        term *= -t / kf;
        let contrib = term / kf;
        sum += contrib;
        if contrib.abs() < f64::EPSILON * sum.abs() {
            break;
        }
    }
    -EULER_GAMMA - t.ln() - sum
}

fn e1_continued_fraction(t: f64) -> f64 {
    // E1(t) = e^{-t} / (t + 1 - 1^2/(t + 3 - 2^2/(t + 5 - ...)))
    let tiny = 1e-300;
    let mut b = t + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_TERMS {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < f64::EPSILON {
            break;
        }
    }
    h * (-t).exp()
}

/// Antiderivative of `E1`: `G(t) = t E1(t) - e^{-t}`, with `G(0) = -1`.
pub(crate) fn e1_antiderivative(t: f64) -> f64 {
    if t == 0.0 {
        -1.0
    } else {
        t * exp_integral_e1(t) - (-t).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson quadrature, used only as an independent oracle.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(
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
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            let diff = left + right - whole;
            if depth == 0 || diff.abs() <= 15.0 * tol {
                left + right + diff / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn e1_by_quadrature(t: f64) -> f64 {
        // Substituting s = t e^w keeps the integrand smooth: ∫_0^∞ exp(-t e^w) dw.
        let f = |w: f64| (-t * w.exp()).exp();
        let upper = (60.0 / t).ln().max(1.0);
        adaptive_simpson(&f, 0.0, upper, 1e-15)
    }

    #[test]
    fn small_argument_matches_two_term_expansion() {
        let x: f64 = -1e-8;
        let expansion = EULER_GAMMA + x.abs().ln();
        // The next term is x itself, so the expansion is accurate to ~1e-8.
        assert!((exp_integral_ei(x) - expansion).abs() < 2e-8);
        assert!((exp_integral_ei(x) - (expansion + x)).abs() < 1e-15);
    }

    #[test]
    fn matches_quadrature_to_ten_digits() {
        for &t in &[0.5, 1.0, 2.0, 0.05, 3.7, 10.0] {
            let reference = e1_by_quadrature(t);
            let got = exp_integral_e1(t);
            let rel = (got - reference).abs() / reference;
            assert!(rel < 1e-10, "t={t}: {got} vs {reference} ({rel:e})");
            assert_eq!(exp_integral_ei(-t), -got);
        }
    }

    #[test]
    fn branches_agree_at_the_cutoff() {
        let below = e1_series(SERIES_CUTOFF);
        let above = e1_continued_fraction(SERIES_CUTOFF);
        assert!((below - above).abs() < 1e-14 * below);
        let t = 1.5;
        assert!((e1_series(t) - e1_continued_fraction(t)).abs() < 1e-13 * e1_series(t));
    }

    #[test]
    fn ei_is_decreasing_on_negative_axis() {
        // Ei'(x) = e^x / x < 0 for x < 0.
        let mut prev = f64::INFINITY;
        let mut x = -40.0;
        while x < -1e-6 {
            let v = exp_integral_ei(x);
            assert!(v < prev, "not decreasing at {x}");
            prev = v;
            x *= 0.97;
        }
    }

    #[test]
    fn antiderivative_differentiates_to_e1() {
        for &t in &[0.01, 0.3, 1.0, 2.5, 8.0] {
            let h = 1e-5 * t;
            let fd = (e1_antiderivative(t + h) - e1_antiderivative(t - h)) / (2.0 * h);
            assert!((fd - exp_integral_e1(t)).abs() < 1e-7 * exp_integral_e1(t).max(1e-3));
        }
        assert!((e1_antiderivative(1e-14) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn special_inputs() {
        assert!(exp_integral_e1(-1.0).is_nan());
        assert!(exp_integral_e1(f64::NAN).is_nan());
        assert_eq!(exp_integral_e1(0.0), f64::INFINITY);
        assert_eq!(exp_integral_e1(800.0), 0.0);
    }
}

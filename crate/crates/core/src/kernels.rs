//! Memory kernels of the driving noise.
//!
//! The noise of asset `j` admits the representations
//! `dY_j = dB_j - (int_0^t k_j(t,s) dY_j(s)) dt = dB_j - (int_0^t l_j(t,s) dB_j(s)) dt`
//! with the innovation Brownian motion `B_j`. All expressions containing
//! `exp(q t)` are evaluated with the common factor `exp(-q t)` pulled out, so
//! they stay finite for arbitrarily long horizons.

use crate::error::{Error, Result};
use crate::model::MemoryParams;

/// Below this value of `(p+q) t` the variance ratio uses its series expansion.
const SERIES_THRESHOLD: f64 = 1e-6;

fn check_lag(t: f64, s: f64) -> Result<()> {
    if !(s >= 0.0) || !(s <= t) || !t.is_finite() {
        return Err(Error::Domain(format!("kernel requires 0 <= s <= t, got s={s}, t={t}")));
    }
    Ok(())
}

/// `k_j(t, s)` for raw parameters; caller guarantees `0 <= s <= t`.
pub(crate) fn k_raw(p: f64, q: f64, t: f64, s: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    let a = 2.0 * q + p;
    let num = p * a * (a * (-q * (t - s)).exp() - p * (-q * (t + s)).exp());
    let den = a * a - p * p * (-2.0 * q * t).exp();
    num / den
}

/// `l_j(s)`; caller guarantees `s >= 0`.
pub(crate) fn l_raw(p: f64, q: f64, s: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    let a = 2.0 * q + p;
    let e = (-2.0 * q * s).exp();
    p * (1.0 - 2.0 * p * q * e / (a * a - p * p * e))
}

#[cfg(test)]
/// `d l_j / ds`, positive for `p > 0`.
pub(crate) fn l_raw_derivative(p: f64, q: f64, s: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    let a = 2.0 * q + p;
    let e = (-2.0 * q * s).exp();
    let den = a * a - p * p * e;
    // d/ds [e / den] = -2q e a^2 / den^2
    2.0 * p * p * q * (2.0 * q * e * a * a) / (den * den)
}

impl MemoryParams {
    /// Kernel `k_j(t, s)` of the autoregressive representation, `0 <= s <= t`.
    pub fn kernel_k(&self, j: usize, t: f64, s: f64) -> Result<f64> {
        self.check_asset(j)?;
        check_lag(t, s)?;
        Ok(k_raw(self.p()[j], self.q()[j], t, s))
    }

    /// Diagonal kernel `l_j(s)`; nondecreasing with `0 <= l_j(s) <= p_j`.
    pub fn kernel_l_diag(&self, j: usize, s: f64) -> Result<f64> {
        self.check_asset(j)?;
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!("l_j(s) requires s >= 0, got {s}")));
        }
        Ok(l_raw(self.p()[j], self.q()[j], s))
    }

    /// Kernel `l_j(t, s) = exp(-(p_j+q_j)(t-s)) l_j(s)`, `0 <= s <= t`.
    pub fn kernel_l(&self, j: usize, t: f64, s: f64) -> Result<f64> {
        self.check_asset(j)?;
        check_lag(t, s)?;
        let (p, q) = (self.p()[j], self.q()[j]);
        Ok((-(p + q) * (t - s)).exp() * l_raw(p, q, s))
    }
}

/// `(1 - e^{-x}) / x` with its continuous extension at 0.
fn relaxation(x: f64) -> f64 {
    if x < SERIES_THRESHOLD {
        1.0 - x / 2.0 + x * x / 6.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Derivative of [`relaxation`].
fn relaxation_derivative(x: f64) -> f64 {
    if x < 1e-2 {
        let x2 = x * x;
        -0.5 + x / 3.0 - x2 / 8.0 + x2 * x / 30.0 - x2 * x2 / 144.0 + x2 * x2 * x / 840.0
    } else {
        ((-x).exp() * (1.0 + x) - 1.0) / (x * x)
    }
}

pub(crate) fn f_raw(p: f64, q: f64, t: f64) -> f64 {
    let s = p + q;
    (q * q + p * (p + 2.0 * q) * relaxation(s * t)) / (s * s)
}

/// Variance ratio `E[Y^2(t)]/t = f(t; p, q)`.
///
/// Equals 1 for `p = 0`, tends to 1 as `t -> 0+` and to `q^2/(p+q)^2` as
/// `t -> inf`.
pub fn variance_ratio_f(p: f64, q: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("variance ratio requires t > 0, got {t}")));
    }
    if !(q > 0.0) || !(p >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance ratio requires q > 0 and p >= 0, got p={p}, q={q}"
        )));
    }
    Ok(f_raw(p, q, t))
}

/// `f(t; p, q)` together with its partial derivatives in `p` and `q`.
pub(crate) fn f_with_gradient(p: f64, q: f64, t: f64) -> (f64, f64, f64) {
    let s = p + q;
    let s2 = s * s;
    let s3 = s2 * s;
    let q2 = q * q;
    let e = relaxation(s * t);
    let de = relaxation_derivative(s * t) * t;
    let coef = p * (p + 2.0 * q) / s2;
    let f = (q2 + p * (p + 2.0 * q) * e) / s2;
    let df_dp = -2.0 * q2 / s3 + 2.0 * q2 / s3 * e + coef * de;
    let df_dq = 2.0 * q * p / s3 - 2.0 * q * p / s3 * e + coef * de;
    (f, df_dp, df_dq)
}

/// Per-asset threshold `alpha*_j`: `-inf` when `p_j <= 2 q_j`, otherwise
/// `-3 - 8 q_j / (p_j - 2 q_j)`.
pub fn alpha_star_j(p: f64, q: f64) -> f64 {
    if p <= 2.0 * q {
        f64::NEG_INFINITY
    } else {
        -3.0 - 8.0 * q / (p - 2.0 * q)
    }
}

/// Lower admissibility bound `alpha* = max_j alpha*_j`, in `[-inf, -3)`.
pub fn alpha_star(params: &MemoryParams) -> f64 {
    params
        .p()
        .iter()
        .zip(params.q())
        .map(|(&p, &q)| alpha_star_j(p, q))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(p: f64, q: f64) -> MemoryParams {
        MemoryParams::new(vec![p], vec![q]).unwrap()
    }

    #[test]
    fn memoryless_kernels_vanish() {
        let m = single(0.0, 0.7);
        for &(t, s) in &[(0.0, 0.0), (1.0, 0.3), (50.0, 49.0)] {
            assert_eq!(m.kernel_k(0, t, s).unwrap(), 0.0);
            assert_eq!(m.kernel_l(0, t, s).unwrap(), 0.0);
            assert_eq!(m.kernel_l_diag(0, s).unwrap(), 0.0);
        }
    }

    #[test]
    fn direct_evaluations() {
        let m = single(1.0, 1.0);
        assert!((m.kernel_k(0, 0.0, 0.0).unwrap() - 0.75).abs() < 1e-15);
        assert!((m.kernel_l_diag(0, 0.0).unwrap() - 0.75).abs() < 1e-15);
        let expected = (-2.0f64).exp() * 0.75;
        assert!((m.kernel_l(0, 1.0, 0.0).unwrap() - expected).abs() < 1e-15);
        assert_eq!(m.kernel_l(0, 2.5, 2.5).unwrap(), m.kernel_l_diag(0, 2.5).unwrap());
    }

    #[test]
    fn l_within_exponential_band() {
        let m = single(1.0, 1.0);
        let l = m.kernel_l_diag(0, 10.0).unwrap();
        let band = (-20.0f64).exp() / 4.0;
        assert!((l - 1.0).abs() <= band);
    }

    #[test]
    fn domain_errors() {
        let m = single(0.5, 0.5);
        assert!(matches!(m.kernel_k(0, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(m.kernel_k(0, 1.0, -0.1), Err(Error::Domain(_))));
        assert!(matches!(m.kernel_l(0, 1.0, 1.5), Err(Error::Domain(_))));
        assert!(matches!(m.kernel_l_diag(0, -1.0), Err(Error::Domain(_))));
        assert!(m.kernel_k(1, 1.0, 0.5).is_err());
        assert!(matches!(variance_ratio_f(0.1, 0.1, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn long_horizon_does_not_overflow() {
        let m = single(3.0, 2.0);
        let k = m.kernel_k(0, 1e4, 9_999.5).unwrap();
        assert!(k.is_finite() && k > 0.0);
        let l = m.kernel_l_diag(0, 1e4).unwrap();
        assert_eq!(l, 3.0);
    }

    #[test]
    fn variance_ratio_limits() {
        for &q in &[0.01, 0.3, 5.0] {
            for &t in &[1e-9, 0.5, 40.0] {
                assert!((variance_ratio_f(0.0, q, t).unwrap() - 1.0).abs() < 1e-15);
            }
        }
        let (p, q) = (0.261, 0.044);
        let floor = q * q / ((p + q) * (p + q));
        assert!((variance_ratio_f(p, q, 1e6).unwrap() - floor).abs() < 1e-5);
        assert!((variance_ratio_f(p, q, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        // continuity across the series switch
        let x0 = SERIES_THRESHOLD / (p + q);
        let below = variance_ratio_f(p, q, x0 * (1.0 - 1e-9)).unwrap();
        let above = variance_ratio_f(p, q, x0 * (1.0 + 1e-9)).unwrap();
        assert!((below - above).abs() < 1e-14);
    }

    #[test]
    fn alpha_star_values() {
        let m = MemoryParams::new(vec![0.1, 0.2], vec![0.1, 0.5]).unwrap();
        assert_eq!(alpha_star(&m), f64::NEG_INFINITY);
        assert!((alpha_star(&single(0.3, 0.1)) + 11.0).abs() < 1e-12);
        let reference = MemoryParams::new(vec![0.086, 0.261, 0.076], vec![0.305, 0.044, 0.098]).unwrap();
        let expected = -3.0 - 8.0 * 0.044 / (0.261 - 2.0 * 0.044);
        assert_eq!(alpha_star_j(0.086, 0.305), f64::NEG_INFINITY);
        assert_eq!(alpha_star_j(0.076, 0.098), f64::NEG_INFINITY);
        assert!((alpha_star(&reference) - expected).abs() < 1e-14);
        assert!(alpha_star(&reference) < -3.0);
    }

    #[test]
    fn f_gradient_matches_finite_differences() {
        for &(p, q, t) in &[(0.086, 0.305, 1.0), (0.261, 0.044, 37.0), (0.5, 0.02, 0.001), (0.0, 0.3, 5.0)] {
            let (_, dp, dq) = f_with_gradient(p, q, t);
            let h = 1e-6;
            let fp = if p == 0.0 {
                (-3.0 * f_raw(0.0, q, t) + 4.0 * f_raw(h, q, t) - f_raw(2.0 * h, q, t)) / (2.0 * h)
            } else {
                (f_raw(p + h, q, t) - f_raw(p - h, q, t)) / (2.0 * h)
            };
            let fq = (f_raw(p, q + h, t) - f_raw(p, q - h, t)) / (2.0 * h);
            assert!((dp - fp).abs() <= 1e-6 * (1.0 + dp.abs()), "dp {dp} vs {fp}");
            assert!((dq - fq).abs() <= 1e-6 * (1.0 + dq.abs()), "dq {dq} vs {fq}");
        }
    }

    #[test]
    fn l_derivative_matches_finite_difference() {
        let (p, q) = (0.8, 0.3);
        for &s in &[0.0, 0.4, 3.0] {
            let h = 1e-6;
            let fd = (l_raw(p, q, s + h) - l_raw(p, q, (s - h).max(0.0))) / (s + h - (s - h).max(0.0));
            assert!((l_raw_derivative(p, q, s) - fd).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn k_diagonal_equals_l(p in 0.0f64..5.0, q in 0.01f64..5.0, t in 0.0f64..50.0) {
            let m = single(p, q);
            let k = m.kernel_k(0, t, t).unwrap();
            let l = m.kernel_l_diag(0, t).unwrap();
            prop_assert!((k - l).abs() <= 1e-12);
        }

        #[test]
        fn l_bounded_monotone(p in 0.0f64..5.0, q in 0.01f64..5.0, s in 0.0f64..20.0, ds in 0.0f64..5.0) {
            let m = single(p, q);
            let a = m.kernel_l_diag(0, s).unwrap();
            let b = m.kernel_l_diag(0, s + ds).unwrap();
            prop_assert!(a >= 0.0 && a <= p);
            prop_assert!(b >= a - 1e-15);
            let band = p * p * (-2.0 * q * s).exp() / (2.0 * (p + q));
            prop_assert!((a - p).abs() <= band + 1e-15);
        }

        #[test]
        fn f_decreasing_and_bounded(p in 0.001f64..3.0, q in 0.01f64..3.0, t in 0.01f64..100.0, dt in 0.01f64..10.0) {
            let a = variance_ratio_f(p, q, t).unwrap();
            let b = variance_ratio_f(p, q, t + dt).unwrap();
            let floor = q * q / ((p + q) * (p + q));
            prop_assert!(b <= a + 1e-15);
            prop_assert!(a <= 1.0 + 1e-15 && b >= floor - 1e-15);
        }

        #[test]
        fn alpha_star_monotone_in_p(p in 0.0f64..3.0, dp in 0.0f64..3.0, q in 0.01f64..1.0) {
            prop_assert!(alpha_star_j(p + dp, q) >= alpha_star_j(p, q));
        }
    }
}

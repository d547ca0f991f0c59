//! Numerical primitives: stable logistic transforms, log-sum-exp, gamma
//! special functions, Gauss-Hermite quadrature, and a sparse LDL' solver
//! for symmetric positive-definite precision matrices.

pub mod gamma;
pub mod quadrature;
pub mod sparse;

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 33.3 {
        // exp(-x) underflows relative to x
        x
    } else if x > -37.0 {
        x.exp().ln_1p()
    } else {
        x.exp()
    }
}

/// Inverse logit, stable in both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit transform; requires `p` strictly inside (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "logit domain violation: {p}");
    (p / (1.0 - p)).ln()
}

/// `log(sum(exp(xs)))` guarded against overflow; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log1p_exp_matches_naive_in_safe_range() {
        for &x in &[-30.0, -5.0, -0.1, 0.0, 0.1, 5.0, 30.0] {
            let naive = (1.0f64 + f64::exp(x)).ln();
            assert!((log1p_exp(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn log1p_exp_extreme_arguments() {
        assert_eq!(log1p_exp(1000.0), 1000.0);
        assert!(log1p_exp(-800.0) >= 0.0);
        assert!(log1p_exp(-800.0) < 1e-300);
    }

    #[test]
    fn sigmoid_symmetry_and_tails() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        for &x in &[-40.0, -3.0, 0.7, 25.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &x in &[-8.0, -1.0, 0.0, 2.5, 9.0] {
            assert!((logit(sigmoid(x)) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn log_sum_exp_basic() {
        let xs = [1.0f64, 2.0, 3.0];
        let direct = (xs.iter().map(|x| x.exp()).sum::<f64>()).ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}

//! Small statistics helpers shared by the estimators and the experiment
//! driver.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{arg_err, Result};

/// Standard normal quantile `z_p`, `0 < p < 1`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(arg_err(format!("quantile level must lie in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    empirical_quantile(xs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Acklam's rational approximation, kept independent of statrs.
    fn acklam(p: f64) -> f64 {
        const A: [f64; 6] = [
            -3.969683028665376e+01,
            2.209460984245205e+02,
            -2.759285104469687e+02,
            1.38357751867269e+02,
            -3.066479806614716e+01,
            2.506628277459239e+00,
        ];
        const B: [f64; 5] = [
            -5.447609879822406e+01,
            1.615858368580409e+02,
            -1.556989798598866e+02,
            6.680131188771972e+01,
            -1.328068155288572e+01,
        ];
        const C: [f64; 6] = [
            -7.784894002430293e-03,
            -3.223964580411365e-01,
            -2.400758277161838e+00,
            -2.549732539343734e+00,
            4.374664141464968e+00,
            2.938163982698783e+00,
        ];
        const D: [f64; 4] = [
            7.784695709041462e-03,
            3.224671290700398e-01,
            2.445134137142996e+00,
            3.754408661907416e+00,
        ];
        let plow = 0.02425;
        if p < plow {
            let q = (-2.0 * p.ln()).sqrt();
            (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        } else if p <= 1.0 - plow {
            let q = p - 0.5;
            let r = q * q;
            (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
                / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
        } else {
            -acklam(1.0 - p)
        }
    }

    #[test]
    fn quantile_matches_rational_approximation_and_tables() {
        for &p in &[0.01, 0.05, 0.1, 0.5, 0.9, 0.95, 0.975, 0.999] {
            assert!((normal_quantile(p).unwrap() - acklam(p)).abs() < 1e-8, "p={p}");
        }
        assert!((normal_quantile(0.9).unwrap() - 1.2816).abs() < 1e-4);
        assert!((normal_quantile(0.95).unwrap() - 1.6449).abs() < 1e-4);
        assert!((normal_quantile(0.975).unwrap() - 1.9600).abs() < 1e-4);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&xs), 2.5);
        assert_eq!(empirical_quantile(&xs, 0.0), 1.0);
        assert_eq!(empirical_quantile(&xs, 1.0), 4.0);
        assert_eq!(mean(&xs), 2.5);
    }
}

//! Sample statistics for Monte Carlo ensembles and log-log order fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of the mean.
    pub mean_se: f64,
    /// Standard error of the sample variance, from the fourth central moment.
    pub variance_se: f64,
}

pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len();
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (m2, m4) = xs.iter().fold((0.0, 0.0), |(m2, m4), x| {
        let d = x - mean;
        (m2 + d * d, m4 + d * d * d * d)
    });
    let variance = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
    let m2n = m2 / nf;
    let m4n = m4 / nf;
    Moments {
        count: n,
        mean,
        variance,
        mean_se: (variance / nf).sqrt(),
        variance_se: ((m4n - m2n * m2n).max(0.0) / nf).sqrt(),
    }
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    slope(&lx, &ly)
}

/// Two-sided Student-t confidence interval for the mean of `xs`.
pub fn mean_confidence_interval(xs: &[f64], level: f64) -> (f64, f64) {
    let m = moments(xs);
    if xs.len() < 2 {
        return (m.mean, m.mean);
    }
    let t = StudentsT::new(0.0, 1.0, (xs.len() - 1) as f64)
        .map(|d| d.inverse_cdf(0.5 + level / 2.0))
        .unwrap_or(f64::NAN);
    (m.mean - t * m.mean_se, m.mean + t * m.mean_se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_small_sample() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_power_law_slope() {
        let x = [0.02, 0.04, 0.08, 0.16];
        let y: Vec<f64> = x.iter().map(|e| 3.0 * e * e).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interval_contains_mean() {
        let (lo, hi) = mean_confidence_interval(&[1.9, 2.1, 2.0, 1.95, 2.05], 0.95);
        assert!(lo < 2.0 && hi > 2.0);
        assert!(hi - lo < 0.2);
    }
}

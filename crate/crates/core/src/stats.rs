//! Order-fixed reductions for Monte Carlo estimates.
//!
//! Every reduction runs sequentially over an indexed slice, so results do
//! not depend on how the per-path values were produced.

use serde::Serialize;

/// Compensated (Neumaier) sum.
pub fn sum(values: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            comp += (s - t) + v;
        } else {
            comp += (v - t) + s;
        }
        s = t;
    }
    s + comp
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = mean(values);
        if n < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = sum(&dev) / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

/// `sqrt(a² + b²)`, the standard error of a difference of independent estimates.
pub fn combined_se(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn log_log_slope(h: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = mean(&xs);
    let my = mean(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(&v), 2.0);
    }

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples(&[3.0; 10]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn standard_error_matches_hand_value() {
        // var = 2.5, n = 5 -> se = sqrt(0.5)
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((e.mean - 3.0).abs() < 1e-15);
        assert!((e.se - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slope_of_power_law() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        assert!((log_log_slope(&h, &e) - 4.0).abs() < 1e-12);
    }
}

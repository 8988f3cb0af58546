//! Least-squares power-law fitting in log-log space.

use crate::error::{Error, Result};

/// Fit of `t = c * lambda^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    /// Prefactor, always positive.
    pub coefficient: f64,
    /// Exponent.
    pub exponent: f64,
    /// RMS residual in log-log space; zero when the inputs lie on an exact
    /// power law.
    pub residual: f64,
}

/// Ordinary least squares on (log x, log y). Rejects fewer than two points
/// and nonpositive coordinates.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) {
            return Err(Error::NonPositivePoint { x, y });
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::NonPositivePoint { x: points[0].0, y: f64::NAN });
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        coefficient: intercept.exp(),
        exponent: slope,
        residual: (ss / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_inverse_law() {
        let fit = fit_power_law(&[(0.1, 10.0), (0.01, 100.0), (0.001, 1000.0)]).unwrap();
        assert!((fit.coefficient - 1.0).abs() < 1e-12);
        assert!((fit.exponent + 1.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn exact_with_prefactor() {
        let fit = fit_power_law(&[(0.1, 20.0), (0.01, 200.0)]).unwrap();
        assert!((fit.coefficient - 2.0).abs() < 1e-12);
        assert!((fit.exponent + 1.0).abs() < 1e-12);
    }

    #[test]
    fn six_decades_exact() {
        let pts: Vec<(f64, f64)> = (0..7)
            .map(|i| {
                let lam = 10f64.powi(-i);
                (lam, 3.5 / lam)
            })
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.coefficient - 3.5).abs() < 1e-10);
        assert!((fit.exponent + 1.0).abs() < 1e-13);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(fit_power_law(&[(1.0, 1.0)]), Err(Error::TooFewPoints(1))));
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (-1.0, 2.0)]),
            Err(Error::NonPositivePoint { .. })
        ));
        assert!(matches!(
            fit_power_law(&[(1.0, 0.0), (2.0, 2.0)]),
            Err(Error::NonPositivePoint { .. })
        ));
    }
}

//! Power-law fit of Monte Carlo error against particle count.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("rate fit needs at least two distinct N and positive errors: {0}")]
    DegenerateInput(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual in log space.
    pub residual: f64,
}

/// Least squares of `log error` on `log N`.
pub fn rate_fit(points: &[(usize, f64)]) -> Result<RateFit, FitError> {
    if let Some(&(n, e)) = points.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite()) || p.0 == 0) {
        return Err(FitError::DegenerateInput(format!("point ({n}, {e})")));
    }
    let mut ns: Vec<usize> = points.iter().map(|p| p.0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 {
        return Err(FitError::DegenerateInput(format!("{} distinct N", ns.len())));
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|&(n, e)| ((n as f64).ln(), e.ln())).collect();
    let k = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / k;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xy.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(RateFit {
        points: points.to_vec(),
        slope,
        intercept,
        residual: (sse / k).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let f = rate_fit(&[(100, 0.1), (400, 0.05)]).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-15);
        assert!(matches!(rate_fit(&[(100, 0.1), (100, 0.2)]), Err(FitError::DegenerateInput(_))));
        assert!(rate_fit(&[(100, 0.1), (200, 0.0)]).is_err());
        assert!(rate_fit(&[(100, 0.1)]).is_err());
    }

    proptest! {
        #[test]
        fn exact_power_laws(
            exponent in -2.0f64..2.0,
            scale in 0.01f64..10.0,
            ns in prop::collection::btree_set(1usize..100_000, 2..8),
        ) {
            let points: Vec<(usize, f64)> = ns.iter().map(|&n| (n, scale * (n as f64).powf(exponent))).collect();
            let f = rate_fit(&points).unwrap();
            prop_assert!((f.slope - exponent).abs() <= 1e-12, "{} vs {}", f.slope, exponent);
        }
    }
}

//! Power-law fits on log-log data.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub log_sizes: Vec<f64>,
    pub log_errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl RateFit {
    /// Fitted error at `size`.
    pub fn predict(&self, size: f64) -> f64 {
        (self.intercept + self.slope * size.ln()).exp()
    }
}

/// Ordinary least squares of `ln error` on `ln size`.
pub fn fit_rate(sizes: &[f64], errors: &[f64]) -> Result<RateFit> {
    if sizes.len() != errors.len() {
        return Err(Error::domain("sizes and errors differ in length"));
    }
    if sizes.len() < 3 {
        return Err(Error::domain("a rate fit needs at least three points"));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::domain(format!("rate fit needs positive finite errors, got {e}")));
    }
    if sizes.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::domain("rate fit needs positive sizes"));
    }
    let xs: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (slope, intercept, r2) = crate::stats::ols(&xs, &ys);
    Ok(RateFit {
        log_sizes: xs,
        log_errors: ys,
        slope,
        intercept,
        r2,
    })
}

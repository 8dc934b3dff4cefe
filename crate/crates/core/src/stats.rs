//! Small sample statistics used by the estimators and experiments.

use crate::error::{Result, SimError};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance. Needs at least two samples.
pub fn sample_variance(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(SimError::Domain(format!(
            "variance needs at least 2 samples, got {}",
            xs.len()
        )));
    }
    let m = mean(xs);
    Ok(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Ordinary least-squares line `y = a + b·x`; returns `(a, b, stderr_b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(SimError::Fit(format!("line fit needs at least 3 paired points, got {n}")));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(SimError::Fit("line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = x.iter().zip(y).map(|(a_, b_)| (b_ - a - b * a_).powi(2)).sum();
    let se = (rss / (n - 2) as f64 / sxx).sqrt();
    Ok((a, b, se))
}

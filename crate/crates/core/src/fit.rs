//! Non-negative weighted least-squares fit of the four-term R(M_t) model with
//! bootstrap confidence intervals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{model_basis, model_r, NoiseCoeffs};
use crate::error::{Result, SimError};
use crate::rng::{rng_from_seed, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub m_t: f64,
    pub r: f64,
    /// Least-squares weight of the squared residual.
    pub weight: f64,
}

impl FitPoint {
    /// Point with the default constant-fractional-error weight `1/R²`.
    pub fn new(m_t: f64, r: f64) -> Self {
        Self {
            m_t,
            r,
            weight: 1.0 / (r * r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bootstrap {
    /// Resample fractional residuals around the fitted curve.
    Residual,
    /// Resample whole points.
    Cases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coeffs: NoiseCoeffs,
    pub lower: NoiseCoeffs,
    pub upper: NoiseCoeffs,
    pub confidence: f64,
    pub resamples: usize,
    pub weighted_rss: f64,
}

/// Lawson–Hanson active-set solver for `min ‖Ax − b‖` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(SimError::Fit("design matrix and data disagree in length".into()));
    }
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let solve_passive = |passive: &[bool]| -> Result<DVector<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(m, idx.len(), |r, c| a[(r, idx[c])]);
        let svd = sub.svd(true, true);
        let z = svd
            .solve(b, 1e-13)
            .map_err(|e| SimError::Fit(format!("least-squares subproblem: {e}")))?;
        let mut full = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            full[j] = z[k];
        }
        Ok(full)
    };
    for _ in 0..(3 * n + 30) {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { return Ok(x) };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive)?;
            if (0..n).all(|k| !passive[k] || z[k] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for k in 0..n {
                if passive[k] && z[k] <= 0.0 {
                    alpha = alpha.min(x[k] / (x[k] - z[k]));
                }
            }
            x += (z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= 1e-15 * x.amax().max(1.0) {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    Ok(x)
}

fn check_points(points: &[FitPoint]) -> Result<()> {
    if points.len() < 4 {
        return Err(SimError::Fit(format!("need at least 4 points, got {}", points.len())));
    }
    for p in points {
        if !(p.m_t > 0.0 && p.r.is_finite() && p.weight > 0.0 && p.weight.is_finite()) {
            return Err(SimError::Fit(format!("invalid point {p:?}")));
        }
    }
    let lo = points.iter().map(|p| p.m_t).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.m_t).fold(0.0, f64::max);
    if hi < 10.0 * lo * (1.0 - 1e-12) {
        return Err(SimError::Fit(format!("points must span a decade in m_t, got [{lo}, {hi}]")));
    }
    Ok(())
}

/// Point estimate of the coefficients.
pub fn fit_coeffs(points: &[FitPoint]) -> Result<NoiseCoeffs> {
    check_points(points)?;
    let m = points.len();
    let mut a = DMatrix::from_fn(m, 4, |i, j| model_basis(points[i].m_t)[j] * points[i].weight.sqrt());
    let b = DVector::from_fn(m, |i, _| points[i].r * points[i].weight.sqrt());
    let mut scale = [0.0; 4];
    for j in 0..4 {
        scale[j] = a.column(j).norm();
        if !(scale[j] > 0.0) {
            return Err(SimError::Fit("degenerate design matrix".into()));
        }
        a.column_mut(j).unscale_mut(scale[j]);
    }
    if a.clone().svd(false, false).rank(1e-10) < 4 {
        return Err(SimError::Fit("degenerate design matrix".into()));
    }
    let x = nnls(&a, &b)?;
    Ok(NoiseCoeffs::from_array([
        x[0] / scale[0],
        x[1] / scale[1],
        x[2] / scale[2],
        x[3] / scale[3],
    ]))
}

/// Diagonal of the weighted hat matrix.
fn leverages(points: &[FitPoint]) -> Result<Vec<f64>> {
    let m = points.len();
    let mut a = DMatrix::from_fn(m, 4, |i, j| model_basis(points[i].m_t)[j] * points[i].weight.sqrt());
    for j in 0..4 {
        let s = a.column(j).norm();
        a.column_mut(j).unscale_mut(s);
    }
    let svd = a.svd(true, false);
    let u = svd.u.ok_or_else(|| SimError::Fit("hat matrix".into()))?;
    Ok((0..m).map(|i| u.row(i).iter().map(|v| v * v).sum()).collect())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let f = pos - i as f64;
    sorted[i] * (1.0 - f) + sorted[j] * f
}

/// Fit with percentile bootstrap intervals at `confidence`.
pub fn fit_r_with(
    points: &[FitPoint],
    resamples: usize,
    confidence: f64,
    method: Bootstrap,
    seed: u64,
) -> Result<FitResult> {
    let coeffs = fit_coeffs(points)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(SimError::Fit(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let fitted: Vec<f64> = points
        .iter()
        .map(|p| model_r(p.m_t, &coeffs))
        .collect::<Result<_>>()?;
    let weighted_rss = points
        .iter()
        .zip(&fitted)
        .map(|(p, f)| p.weight * (p.r - f).powi(2))
        .sum();
    let n = points.len();
    // Fractional residuals, leverage-adjusted.
    let lev = leverages(points)?;
    let resid: Vec<f64> = points
        .iter()
        .zip(&fitted)
        .zip(&lev)
        .map(|((p, f), h)| if *f > 0.0 { (p.r / f - 1.0) / (1.0 - h).max(1e-3).sqrt() } else { 0.0 })
        .collect();
    let rmean = resid.iter().sum::<f64>() / n as f64;

    let draws: Vec<[f64; 4]> = (0..resamples as u64)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = rng_from_seed(stream_seed(seed, k));
            let sample: Vec<FitPoint> = match method {
                Bootstrap::Residual => points
                    .iter()
                    .zip(&fitted)
                    .map(|(p, f)| {
                        let e = resid[rng.random_range(0..n)] - rmean;
                        let r = f * (1.0 + e);
                        // Weights follow the data the same way the original ones did.
                        FitPoint {
                            m_t: p.m_t,
                            r,
                            weight: p.weight * (p.r / r).powi(2),
                        }
                    })
                    .collect(),
                Bootstrap::Cases => (0..n).map(|_| points[rng.random_range(0..n)]).collect(),
            };
            fit_coeffs(&sample).ok().map(|c| c.as_array())
        })
        .collect();
    if draws.len() < resamples.div_ceil(2).max(1) {
        return Err(SimError::Fit("too many bootstrap resamples were degenerate".into()));
    }
    let tail = 0.5 * (1.0 - confidence);
    let mut lo = [0.0; 4];
    let mut hi = [0.0; 4];
    for j in 0..4 {
        let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        col.sort_by(f64::total_cmp);
        lo[j] = percentile(&col, tail);
        hi[j] = percentile(&col, 1.0 - tail);
    }
    Ok(FitResult {
        coeffs,
        lower: NoiseCoeffs::from_array(lo),
        upper: NoiseCoeffs::from_array(hi),
        confidence,
        resamples: draws.len(),
        weighted_rss,
    })
}

/// Default fit: residual bootstrap, 1000 resamples, 95% intervals.
pub fn fit_r(points: &[FitPoint], seed: u64) -> Result<FitResult> {
    fit_r_with(points, 1000, 0.95, Bootstrap::Residual, seed)
}

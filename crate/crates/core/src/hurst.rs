//! Rescaled-range (R/S) statistics and Hurst index estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations discarded before the regression starts.
pub const DEFAULT_BURN_IN: usize = 100;

/// [`DEFAULT_BURN_IN`], reduced for series too short to afford it.
pub fn burn_in_for(len: usize) -> usize {
    DEFAULT_BURN_IN.min(len.saturating_sub(11) / 2)
}

/// Result of regressing `log(R_T / S_T)` on `log T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstEstimate {
    /// Fitted slope.
    pub hurst: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    pub points_used: usize,
}

/// `R_T / S_T` over the window `series[0..=horizon]`.
///
/// `S_T` is the population standard deviation of the `T + 1` values.
pub fn rs_statistic(series: &[f64], horizon: usize) -> Result<f64> {
    if horizon == 0 || series.len() < horizon + 1 {
        return Err(Error::Domain(format!(
            "horizon {horizon} needs 1 <= T < {} observations",
            series.len()
        )));
    }
    rescaled_range(&series[..=horizon])
        .ok_or_else(|| Error::Degenerate(format!("series is constant over horizon {horizon}")))
}

fn rescaled_range(window: &[f64]) -> Option<f64> {
    let count = window.len() as f64;
    let mean = window.iter().sum::<f64>() / count;
    let (mut acc, mut hi, mut lo, mut ss) = (0.0f64, f64::NEG_INFINITY, f64::INFINITY, 0.0);
    for &x in window {
        let d = x - mean;
        acc += d;
        hi = hi.max(acc);
        lo = lo.min(acc);
        ss += d * d;
    }
    let sd = (ss / count).sqrt();
    (sd > 0.0).then(|| (hi - lo) / sd)
}

/// Hurst index by OLS of `log(R_T/S_T)` on `log T` for every horizon after `burn_in`.
///
/// Horizons whose window is constant are skipped; more than half skipped is an error.
pub fn estimate_hurst(series: &[f64], burn_in: usize) -> Result<HurstEstimate> {
    if series.len() <= burn_in + 10 {
        return Err(Error::Domain(format!(
            "series of length {} too short for burn-in {burn_in}",
            series.len()
        )));
    }
    let horizons = (burn_in + 1)..series.len();
    let total = horizons.len();
    let points: Vec<(f64, f64)> = horizons
        .filter_map(|t| rescaled_range(&series[..=t]).map(|rs| ((t as f64).ln(), rs.ln())))
        .collect();
    if 2 * (total - points.len()) > total || points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} of {total} horizons have zero spread",
            total - points.len()
        )));
    }
    Ok(ols(&points))
}

fn ols(points: &[(f64, f64)]) -> HurstEstimate {
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if points.len() > 2 {
        let ssr: f64 = points
            .iter()
            .map(|&(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (ssr / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    HurstEstimate {
        hurst: slope,
        intercept,
        stderr,
        points_used: points.len(),
    }
}
